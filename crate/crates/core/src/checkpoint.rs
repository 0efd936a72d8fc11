//! Checkpoint container: magic "MUCA", version, stage spec, then student
//! and teacher parameters as named, shape-prefixed little-endian f32
//! arrays. The student section carries the attention projections; the
//! teacher section never does. A resolved-config text blob rides along.

use std::fs;
use std::path::Path;

use crate::array::Array;
use crate::ctsa::CtsaParams;
use crate::error::{Error, Result};
use crate::model::{SegModel, StageSpec};
use crate::synth::atomic_write;

const MAGIC: &[u8; 4] = b"MUCA";
const VERSION: u16 = 1;

const ROLE_STUDENT: u8 = 0;
const ROLE_TEACHER: u8 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str_u16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn array(&mut self, name: &str, a: &Array<f32>) {
        self.str_u16(name);
        self.u8(a.shape.len() as u8);
        for &d in &a.shape {
            self.u32(d as u32);
        }
        for &v in &a.data {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<()> {
        if self.pos + n > self.buf.len() {
            Err(Error::Data("checkpoint: truncated".into()))
        } else {
            Ok(())
        }
    }
    fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        let v = self.buf[self.pos];
        self.pos += 1;
        Ok(v)
    }
    fn u16(&mut self) -> Result<u16> {
        self.need(2)?;
        let v = u16::from_le_bytes(self.buf[self.pos..self.pos + 2].try_into().unwrap());
        self.pos += 2;
        Ok(v)
    }
    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
    fn f32(&mut self) -> Result<f32> {
        self.need(4)?;
        let v = f32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
    fn str_u16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        self.need(n)?;
        let s = String::from_utf8_lossy(&self.buf[self.pos..self.pos + n]).into_owned();
        self.pos += n;
        Ok(s)
    }
    fn array(&mut self) -> Result<(String, Array<f32>)> {
        let name = self.str_u16()?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f32()?);
        }
        Ok((name, Array { shape, data }))
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub spec: StageSpec,
    pub dropout_rate: f64,
    pub heads: usize,
    pub config_text: String,
    pub student: SegModel<f32>,
    pub teacher: SegModel<f32>,
    pub ctsa: CtsaParams<f32>,
}

fn write_model(w: &mut Writer, role: u8, model: &SegModel<f32>, ctsa: Option<&CtsaParams<f32>>) {
    w.u8(role);
    let mut count = 0u32;
    model.visit_params(|_, _, _| count += 1);
    w.u32(count);
    model.visit_params(|name, _, a| w.array(&name, a));
    match ctsa {
        Some(c) => {
            let mut n = 0u32;
            c.visit_params(|_, _, _| n += 1);
            w.u32(n);
            c.visit_params(|name, _, a| w.array(&name, a));
        }
        None => w.u32(0),
    }
}

pub fn save(
    path: &Path,
    student: &SegModel<f32>,
    teacher: &SegModel<f32>,
    ctsa: &CtsaParams<f32>,
    config_text: &str,
) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    let spec = &student.spec;
    w.u16(spec.input_channels as u16);
    w.u16(spec.num_classes as u16);
    w.u16(spec.channels.len() as u16);
    for &c in &spec.channels {
        w.u16(c as u16);
    }
    w.f32(student.dropout_rate as f32);
    w.u16(ctsa.heads as u16);
    let blob = config_text.as_bytes();
    w.u32(blob.len() as u32);
    w.buf.extend_from_slice(blob);
    write_model(&mut w, ROLE_STUDENT, student, Some(ctsa));
    write_model(&mut w, ROLE_TEACHER, teacher, None);
    atomic_write(path, &w.buf)
}

fn assign_params(model: &mut SegModel<f32>, params: &[(String, Array<f32>)]) -> Result<()> {
    let mut missing = None;
    let mut idx = 0usize;
    model.visit_params_mut(|name, _, a| {
        if missing.is_some() {
            return;
        }
        match params.get(idx) {
            Some((pname, pa)) if *pname == name && pa.shape == a.shape => {
                a.data.copy_from_slice(&pa.data);
            }
            _ => missing = Some(name),
        }
        idx += 1;
    });
    if let Some(name) = missing {
        return Err(Error::Data(format!("checkpoint: parameter {name} missing or mis-shaped")));
    }
    if idx != params.len() {
        return Err(Error::Data(format!(
            "checkpoint: {} extra parameters in file",
            params.len() - idx
        )));
    }
    Ok(())
}

fn read_section(r: &mut Reader) -> Result<(u8, Vec<(String, Array<f32>)>, Vec<(String, Array<f32>)>)> {
    let role = r.u8()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(r.array()?);
    }
    let ctsa_count = r.u32()? as usize;
    let mut ctsa = Vec::with_capacity(ctsa_count);
    for _ in 0..ctsa_count {
        ctsa.push(r.array()?);
    }
    Ok((role, params, ctsa))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    r.need(4)?;
    if &bytes[..4] != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a MUCA checkpoint (bad magic)",
            path.display()
        )));
    }
    r.pos = 4;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let input_channels = r.u16()? as usize;
    let num_classes = r.u16()? as usize;
    let n_stages = r.u16()? as usize;
    if n_stages != 4 {
        return Err(Error::Data(format!("checkpoint: expected 4 stages, got {n_stages}")));
    }
    let mut channels = [0usize; 4];
    for c in channels.iter_mut() {
        *c = r.u16()? as usize;
    }
    let dropout_rate = r.f32()? as f64;
    let heads = r.u16()? as usize;
    let blob_len = r.u32()? as usize;
    r.need(blob_len)?;
    let config_text = String::from_utf8_lossy(&r.buf[r.pos..r.pos + blob_len]).into_owned();
    r.pos += blob_len;

    let spec = StageSpec { input_channels, num_classes, channels };
    let (role_s, sparams, sctsa) = read_section(&mut r)?;
    let (role_t, tparams, tctsa) = read_section(&mut r)?;
    if role_s != ROLE_STUDENT || role_t != ROLE_TEACHER {
        return Err(Error::Data("checkpoint: unexpected role ordering".into()));
    }
    if !tctsa.is_empty() {
        return Err(Error::Data("checkpoint: teacher section must not carry attention params".into()));
    }
    let mut student = SegModel::<f32>::new(spec.clone(), dropout_rate, 0);
    assign_params(&mut student, &sparams)?;
    let mut teacher = SegModel::<f32>::new(spec.clone(), dropout_rate, 0);
    assign_params(&mut teacher, &tparams)?;
    let mut ctsa = CtsaParams::<f32>::new(spec.channels[3], heads.max(1), 0)?;
    {
        let mut idx = 0usize;
        let mut bad = None;
        ctsa.visit_params_mut(|name, _, a| {
            if bad.is_some() {
                return;
            }
            match sctsa.get(idx) {
                Some((pname, pa)) if *pname == name && pa.shape == a.shape => {
                    a.data.copy_from_slice(&pa.data);
                }
                _ => bad = Some(name),
            }
            idx += 1;
        });
        if let Some(name) = bad {
            return Err(Error::Data(format!("checkpoint: attention parameter {name} missing")));
        }
    }
    Ok(Checkpoint {
        spec,
        dropout_rate,
        heads,
        config_text,
        student,
        teacher,
        ctsa,
    })
}
