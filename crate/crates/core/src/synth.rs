//! Procedural segmentation scenes, NetPBM raster I/O, and dataset manifest
//! management with labeled/unlabeled split derivation.
//!
//! Scenes mix object scales from 2 px blobs to 40 px rectangles and include
//! two near-identical green textures, so models must separate confusable
//! classes at multiple scales. Classes: 0 low vegetation, 1 building,
//! 2 road, 3 car, 4 tree.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::array::Array;
use crate::augment::AugRecord;
use crate::error::{Error, Result};
use crate::rng::Rng64;

pub const CLASS_NAMES: [&str; 5] = ["low_vegetation", "building", "road", "car", "tree"];

/// Write via a temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))?;
    Ok(())
}

// ── NetPBM I/O ────────────────────────────────────────────────────────

/// Binary PPM (P6) from a planar `[3, H, W]` u8 image.
pub fn write_ppm(path: &Path, img: &Array<u8>) -> Result<()> {
    let (h, w) = (img.shape[1], img.shape[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(img.data[(c * h + y) * w + x]);
            }
        }
    }
    atomic_write(path, &bytes)
}

/// Binary PGM (P5) from an `[H, W]` label raster.
pub fn write_pgm(path: &Path, labels: &Array<u8>) -> Result<()> {
    let (h, w) = (labels.shape[0], labels.shape[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&labels.data);
    atomic_write(path, &bytes)
}

fn parse_pnm_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes).map_err(|_| bad("missing magic"))? != magic {
        return Err(bad(&format!("expected {magic}")));
    }
    let w: usize = token(bytes)
        .map_err(|_| bad("missing width"))?
        .parse()
        .map_err(|_| bad("bad width"))?;
    let h: usize = token(bytes)
        .map_err(|_| bad("missing height"))?
        .parse()
        .map_err(|_| bad("bad height"))?;
    let maxval: usize = token(bytes)
        .map_err(|_| bad("missing maxval"))?
        .parse()
        .map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    Ok((w, h, pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<Array<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let (w, h, data_at) = parse_pnm_header(&bytes, "P6", path)?;
    let need = 3 * w * h;
    if bytes.len() < data_at + need {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    let mut img = Array::<u8>::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.data[(c * h + y) * w + x] = bytes[data_at + (y * w + x) * 3 + c];
            }
        }
    }
    Ok(img)
}

pub fn read_pgm(path: &Path) -> Result<Array<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let (w, h, data_at) = parse_pnm_header(&bytes, "P5", path)?;
    if bytes.len() < data_at + w * h {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    Array::from_vec(&[h, w], bytes[data_at..data_at + w * h].to_vec())
}

// ── scene generation ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            num_classes: 5,
            seed: 0,
        }
    }
}

struct Painter {
    h: usize,
    w: usize,
    rgb: Array<u8>,
    labels: Array<u8>,
}

impl Painter {
    fn new(h: usize, w: usize) -> Self {
        Painter {
            h,
            w,
            rgb: Array::zeros(&[3, h, w]),
            labels: Array::zeros(&[h, w]),
        }
    }

    fn put(&mut self, y: usize, x: usize, color: [f64; 3], class: u8) {
        for (c, &v) in color.iter().enumerate() {
            self.rgb.data[(c * self.h + y) * self.w + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        self.labels.data[y * self.w + x] = class;
    }
}

fn jitter(base: [f64; 3], amount: f64, rng: &mut Rng64) -> [f64; 3] {
    let mut c = base;
    for v in &mut c {
        *v += rng.range_f64(-amount, amount);
    }
    c
}

/// Low-frequency brightness field shared by the two green textures.
fn shade(y: usize, x: usize, phase: f64) -> f64 {
    0.04 * ((y as f64 * 0.13 + phase).sin() + (x as f64 * 0.09 + 0.7 * phase).cos())
}

fn paint_vegetation(p: &mut Painter, rng: &mut Rng64, phase: f64) {
    let base = [0.30, 0.55, 0.25];
    for y in 0..p.h {
        for x in 0..p.w {
            let mut c = jitter(base, 0.02, rng);
            let s = shade(y, x, phase);
            for v in &mut c {
                *v += s;
            }
            p.put(y, x, c, 0);
        }
    }
}

fn paint_trees(p: &mut Painter, rng: &mut Rng64, phase: f64) {
    // Near-identical green, offset only slightly from low vegetation.
    let base = [0.27, 0.52, 0.22];
    let patches = 2 + rng.below(3) as usize;
    for _ in 0..patches {
        let cy = rng.below(p.h as u64) as f64;
        let cx = rng.below(p.w as u64) as f64;
        let ry = rng.range_f64(5.0, 14.0);
        let rx = rng.range_f64(5.0, 14.0);
        let wobble = rng.range_f64(0.0, std::f64::consts::TAU);
        for y in 0..p.h {
            for x in 0..p.w {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let edge = 1.0 + 0.25 * ((dy.atan2(dx) * 3.0 + wobble).sin());
                if dy * dy + dx * dx <= edge {
                    let mut c = jitter(base, 0.02, rng);
                    let s = shade(y, x, phase);
                    for v in &mut c {
                        *v += s;
                    }
                    p.put(y, x, c, 4);
                }
            }
        }
    }
}

fn paint_roads(p: &mut Painter, rng: &mut Rng64) {
    let roads = 2 + rng.below(2) as usize;
    for _ in 0..roads {
        let horizontal = rng.chance(0.5);
        let width = 1 + rng.below(2) as usize;
        let mut t = rng.below(p.h as u64 / 2) as f64 + p.h as f64 / 4.0;
        let drift = rng.range_f64(-0.5, 0.5);
        let n = if horizontal { p.w } else { p.h };
        for s in 0..n {
            t += drift * rng.range_f64(0.0, 1.0);
            let ti = t.round() as isize;
            for off in 0..width as isize {
                let u = ti + off;
                if u < 0 {
                    continue;
                }
                let (y, x) = if horizontal { (u as usize, s) } else { (s, u as usize) };
                if y < p.h && x < p.w {
                    let c = jitter([0.45, 0.45, 0.46], 0.02, rng);
                    p.put(y, x, c, 2);
                }
            }
        }
    }
}

fn paint_buildings(p: &mut Painter, rng: &mut Rng64) {
    let count = 2 + rng.below(2) as usize;
    for _ in 0..count {
        let bw = 8 + rng.below(33) as usize; // 8..=40
        let bh = 8 + rng.below(33) as usize;
        let bw = bw.min(p.w);
        let bh = bh.min(p.h);
        let y0 = rng.below((p.h - bh + 1) as u64) as usize;
        let x0 = rng.below((p.w - bw + 1) as u64) as usize;
        let roof = if rng.chance(0.5) {
            [0.55, 0.33, 0.28] // tiled
        } else {
            [0.52, 0.52, 0.56] // concrete
        };
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let mut c = jitter(roof, 0.02, rng);
                // Roof ridge highlight.
                if (x - x0) * 2 == bw || (x - x0) * 2 + 1 == bw {
                    for v in &mut c {
                        *v += 0.05;
                    }
                }
                p.put(y, x, c, 1);
            }
        }
    }
}

fn paint_cars(p: &mut Painter, rng: &mut Rng64) {
    let palette = [
        [0.85, 0.75, 0.15],
        [0.2, 0.3, 0.8],
        [0.8, 0.2, 0.2],
        [0.9, 0.9, 0.9],
    ];
    let count = 14 + rng.below(8) as usize;
    for _ in 0..count {
        let cw = 2 + rng.below(3) as usize; // 2..=4
        let ch = 2 + rng.below(3) as usize;
        let y0 = rng.below((p.h - ch + 1) as u64) as usize;
        let x0 = rng.below((p.w - cw + 1) as u64) as usize;
        let color = palette[rng.below(palette.len() as u64) as usize];
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                p.put(y, x, jitter(color, 0.03, rng), 3);
            }
        }
    }
}

/// Render one scene; colors quantize to u8 so disk round trips are exact.
fn render_scene(spec: &SceneSpec, rng: &mut Rng64) -> (Array<u8>, Array<u8>) {
    let mut p = Painter::new(spec.height, spec.width);
    let phase = rng.range_f64(0.0, std::f64::consts::TAU);
    paint_vegetation(&mut p, rng, phase);
    if spec.num_classes > 4 {
        paint_trees(&mut p, rng, phase);
    }
    if spec.num_classes > 2 {
        paint_roads(&mut p, rng);
    }
    if spec.num_classes > 1 {
        paint_buildings(&mut p, rng);
    }
    if spec.num_classes > 3 {
        paint_cars(&mut p, rng);
    }
    (p.rgb, p.labels)
}

/// Every class must cover at least 1% of the raster.
fn class_floor_ok(labels: &Array<u8>, k: usize) -> bool {
    let mut counts = vec![0usize; k];
    for &l in &labels.data {
        counts[l as usize] += 1;
    }
    let floor = labels.numel().div_ceil(100);
    counts.iter().all(|&c| c >= floor)
}

/// Deterministic scene for image `index`: retries re-derive the stream
/// until the class-presence floor holds.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(Array<u8>, Array<u8>)> {
    let base = Rng64::seed_from(spec.seed).derive(index);
    for attempt in 0..64 {
        let mut rng = base.derive(attempt);
        let (rgb, labels) = render_scene(spec, &mut rng);
        if class_floor_ok(&labels, spec.num_classes) {
            return Ok((rgb, labels));
        }
    }
    Err(Error::Data(format!(
        "generate_scene: class floor unsatisfied after 64 attempts (image {index})"
    )))
}

// ── manifest ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Tab-separated manifest: one record per line plus a header carrying the
/// default labeled ratio and split seed.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train: Vec<(PathBuf, PathBuf)>,
    pub val: Vec<(PathBuf, PathBuf)>,
    pub test: Vec<(PathBuf, PathBuf)>,
    pub labeled_ratio: f64,
    pub seed: u64,
}

/// 6:2:2 split sizes (train and val round to nearest, test takes the rest).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.6).round() as usize;
    let val = (n as f64 * 0.2).round() as usize;
    let test = n - train.min(n) - val.min(n - train.min(n));
    (train, val, test)
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> &[(PathBuf, PathBuf)] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// round(ratio * n_train) labeled (at least one), drawn as a seeded
    /// permutation prefix; the rest is the unlabeled pool. Disjoint by
    /// construction.
    pub fn labeled_split(&self, ratio: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.train.len();
        let count = (((ratio * n as f64).round() as usize).max(1)).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng64::seed_from(self.seed ^ 0x6C61_6265_6C65_64);
        for i in (1..n).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        let mut labeled: Vec<usize> = order[..count].to_vec();
        let mut unlabeled: Vec<usize> = order[count..].to_vec();
        labeled.sort_unstable();
        unlabeled.sort_unstable();
        (labeled, unlabeled)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("# muca-manifest v1 ratio={} seed={}\n", self.labeled_ratio, self.seed);
        for (split, list) in [
            (Split::Train, &self.train),
            (Split::Val, &self.val),
            (Split::Test, &self.test),
        ] {
            for (img, lab) in list {
                text.push_str(&format!(
                    "{}\t{}\t{}\n",
                    split.name(),
                    img.display(),
                    lab.display()
                ));
            }
        }
        atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read manifest {}", path.display()), e))?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))?;
        let mut ratio = 0.05f64;
        let mut seed = 0u64;
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("ratio=") {
                ratio = v
                    .parse()
                    .map_err(|_| Error::Data(format!("bad ratio in manifest header: {v}")))?;
            } else if let Some(v) = tok.strip_prefix("seed=") {
                seed = v
                    .parse()
                    .map_err(|_| Error::Data(format!("bad seed in manifest header: {v}")))?;
            }
        }
        let mut man = DatasetManifest {
            root,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            labeled_ratio: ratio,
            seed,
        };
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (role, img, lab) = (parts.next(), parts.next(), parts.next());
            match (role, img, lab) {
                (Some(role), Some(img), Some(lab)) => {
                    let rec = (PathBuf::from(img), PathBuf::from(lab));
                    match role {
                        "train" => man.train.push(rec),
                        "val" => man.val.push(rec),
                        "test" => man.test.push(rec),
                        other => {
                            return Err(Error::Data(format!(
                                "manifest line {}: unknown role {other}",
                                ln + 2
                            )))
                        }
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "manifest line {}: expected role<TAB>image<TAB>label",
                        ln + 2
                    )))
                }
            }
        }
        Ok(man)
    }
}

/// Generate `n` scenes under `out`, split 6:2:2, and write the manifest.
pub fn generate(spec: &SceneSpec, n: usize, out: &Path) -> Result<DatasetManifest> {
    if spec.num_classes < 2 || spec.num_classes > 5 {
        return Err(Error::Config(format!(
            "generate: num_classes must be in 2..=5, got {}",
            spec.num_classes
        )));
    }
    let (n_train, n_val, _n_test) = split_sizes(n);
    let mut man = DatasetManifest {
        root: out.to_path_buf(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        labeled_ratio: 0.05,
        seed: spec.seed,
    };
    for i in 0..n {
        let (rgb, labels) = generate_scene(spec, i as u64)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let img_rel = PathBuf::from(format!("images/{}_{:05}.ppm", split.name(), i));
        let lab_rel = PathBuf::from(format!("labels/{}_{:05}.pgm", split.name(), i));
        write_ppm(&out.join(&img_rel), &rgb)?;
        write_pgm(&out.join(&lab_rel), &labels)?;
        match split {
            Split::Train => man.train.push((img_rel, lab_rel)),
            Split::Val => man.val.push((img_rel, lab_rel)),
            Split::Test => man.test.push((img_rel, lab_rel)),
        }
    }
    man.save(&out.join("manifest.tsv"))?;
    Ok(man)
}

// ── batch loading ─────────────────────────────────────────────────────

/// One step's worth of images (and labels for the labeled pool), plus
/// holders the training loop fills in as it augments and pseudo-labels.
#[derive(Clone, Debug, Default)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub images: Vec<Array<f32>>,
    pub labels: Option<Vec<Array<u8>>>,
    pub weak_records: Vec<AugRecord>,
    pub strong_records: Vec<AugRecord>,
    pub pseudo_labels: Vec<Array<u8>>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack per-sample `[3, H, W]` images into `[N, 3, H, W]`.
    pub fn stack_images(images: &[Array<f32>]) -> Array<f32> {
        let (c, h, w) = (images[0].shape[0], images[0].shape[1], images[0].shape[2]);
        let mut out = Array::<f32>::zeros(&[images.len(), c, h, w]);
        for (i, img) in images.iter().enumerate() {
            out.data[i * c * h * w..(i + 1) * c * h * w].copy_from_slice(&img.data);
        }
        out
    }

    pub fn stack_labels(labels: &[Array<u8>]) -> Array<u8> {
        let (h, w) = (labels[0].shape[0], labels[0].shape[1]);
        let mut out = Array::<u8>::zeros(&[labels.len(), h, w]);
        for (i, l) in labels.iter().enumerate() {
            out.data[i * h * w..(i + 1) * h * w].copy_from_slice(&l.data);
        }
        out
    }
}

pub fn load_image_f32(path: &Path) -> Result<Array<f32>> {
    let raw = read_ppm(path)?;
    let data = raw.data.iter().map(|&b| b as f32 / 255.0).collect();
    Array::from_vec(&raw.shape, data)
}

/// Load `indices` from a split; labels attach only when `labeled`.
pub fn load_batch(
    man: &DatasetManifest,
    split: Split,
    indices: &[usize],
    labeled: bool,
) -> Result<BatchPlan> {
    let entries = man.entries(split);
    let mut plan = BatchPlan {
        indices: indices.to_vec(),
        ..BatchPlan::default()
    };
    let mut labels = Vec::new();
    for &i in indices {
        let (img_rel, lab_rel) = entries.get(i).ok_or_else(|| {
            Error::Data(format!(
                "load_batch: index {i} out of range for {} split of {} entries",
                split.name(),
                entries.len()
            ))
        })?;
        plan.images.push(load_image_f32(&man.root.join(img_rel))?);
        if labeled {
            labels.push(read_pgm(&man.root.join(lab_rel))?);
        }
    }
    if labeled {
        plan.labels = Some(labels);
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_examples() {
        assert_eq!(split_sizes(100), (60, 20, 20));
        assert_eq!(split_sizes(200), (120, 40, 40));
        assert_eq!(split_sizes(10), (6, 2, 2));
        assert_eq!(split_sizes(333), (200, 67, 66));
    }

    #[test]
    fn scenes_are_deterministic_and_floored() {
        let spec = SceneSpec { seed: 7, ..SceneSpec::default() };
        let (rgb1, lab1) = generate_scene(&spec, 3).unwrap();
        let (rgb2, lab2) = generate_scene(&spec, 3).unwrap();
        assert_eq!(rgb1, rgb2);
        assert_eq!(lab1, lab2);
        assert!(class_floor_ok(&lab1, 5));
        assert!(lab1.data.iter().all(|&l| l < 5));
        // A different index draws a different scene.
        let (rgb3, _) = generate_scene(&spec, 4).unwrap();
        assert_ne!(rgb1, rgb3);
    }

    #[test]
    fn pnm_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { seed: 11, ..SceneSpec::default() };
        let (rgb, labels) = generate_scene(&spec, 0).unwrap();
        let ip = dir.path().join("img.ppm");
        let lp = dir.path().join("lab.pgm");
        write_ppm(&ip, &rgb).unwrap();
        write_pgm(&lp, &labels).unwrap();
        assert_eq!(read_ppm(&ip).unwrap(), rgb);
        assert_eq!(read_pgm(&lp).unwrap(), labels);
        // f32 load then re-quantize is also exact (u8 grid).
        let f = load_image_f32(&ip).unwrap();
        let requant: Vec<u8> = f.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        assert_eq!(requant, rgb.data);
    }

    #[test]
    fn generate_writes_identical_bytes_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SceneSpec { seed: 9, ..SceneSpec::default() };
        let m1 = generate(&spec, 10, d1.path()).unwrap();
        let m2 = generate(&spec, 10, d2.path()).unwrap();
        assert_eq!(m1.train.len(), 6);
        assert_eq!(m1.val.len(), 2);
        assert_eq!(m1.test.len(), 2);
        for (a, b) in m1.train.iter().zip(&m2.train) {
            let fa = fs::read(d1.path().join(&a.0)).unwrap();
            let fb = fs::read(d2.path().join(&b.0)).unwrap();
            assert_eq!(fa, fb);
        }
        let ma = fs::read(d1.path().join("manifest.tsv")).unwrap();
        let mb = fs::read(d2.path().join("manifest.tsv")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn class_floor_holds_on_every_split() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { seed: 13, ..SceneSpec::default() };
        let man = generate(&spec, 20, dir.path()).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut counts = [0usize; 5];
            let mut total = 0usize;
            for (_, lab) in man.entries(split) {
                let l = read_pgm(&man.root.join(lab)).unwrap();
                for &v in &l.data {
                    counts[v as usize] += 1;
                }
                total += l.numel();
            }
            for (k, &c) in counts.iter().enumerate() {
                assert!(
                    c * 100 >= total,
                    "class {k} below 1% floor on {}",
                    split.name()
                );
            }
        }
    }

    #[test]
    fn manifest_round_trip_and_labeled_rule() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { seed: 21, ..SceneSpec::default() };
        let man = generate(&spec, 10, dir.path()).unwrap();
        let loaded = DatasetManifest::load(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded.train, man.train);
        assert_eq!(loaded.val, man.val);
        assert_eq!(loaded.test, man.test);
        assert_eq!(loaded.seed, 21);

        // round(0.05 * 200) = 10, floor at one, disjoint and inside train.
        let mut big = loaded.clone();
        big.train = (0..200)
            .map(|i| (PathBuf::from(format!("i{i}")), PathBuf::from(format!("l{i}"))))
            .collect();
        let (lab, unlab) = big.labeled_split(0.05);
        assert_eq!(lab.len(), 10);
        assert_eq!(unlab.len(), 190);
        assert!(lab.iter().all(|i| !unlab.contains(i)));
        let (lab1, _) = big.labeled_split(0.0001);
        assert_eq!(lab1.len(), 1);
        // Deterministic.
        assert_eq!(big.labeled_split(0.05).0, lab);
    }

    #[test]
    fn unlabeled_batch_has_no_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { seed: 5, ..SceneSpec::default() };
        let man = generate(&spec, 10, dir.path()).unwrap();
        let plan = load_batch(&man, Split::Train, &[0, 2], false).unwrap();
        assert!(plan.labels.is_none());
        assert_eq!(plan.images.len(), 2);
        let plan_l = load_batch(&man, Split::Train, &[1], true).unwrap();
        assert_eq!(plan_l.labels.as_ref().unwrap().len(), 1);
        assert!(load_batch(&man, Split::Train, &[99], false).is_err());
    }
}
