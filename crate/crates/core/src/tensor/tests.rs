use super::check::{finite_diff_check, CheckInput, DEFAULT_STEP, DEFAULT_TOL};
use super::*;
use crate::array::Array;
use crate::rng::Rng64;

fn leaf32(t: &mut Tape<f32>, shape: &[usize], data: Vec<f32>) -> TensorRef {
    t.leaf(shape, data, true).unwrap()
}

#[test]
fn conv_center_of_ones_is_nine() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[1, 1, 3, 3], vec![1.0; 9]);
    let w = leaf32(&mut t, &[1, 1, 3, 3], vec![1.0; 9]);
    let b = t.constant(&[1], vec![0.0]).unwrap();
    let y = t.conv2d(x, w, b, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 3, 3]);
    assert_eq!(t.data(y)[4], 9.0); // center element
    assert_eq!(t.data(y)[0], 4.0); // corner sees a 2x2 patch
}

#[test]
fn conv_zero_kernel_annihilates() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[2, 3, 4, 4], (0..96).map(|i| i as f32).collect());
    let w = t.constant(&[5, 3, 3, 3], vec![0.0; 135]).unwrap();
    let b = t.constant(&[5], vec![0.0; 5]).unwrap();
    let y = t.conv2d(x, w, b, 1).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv_stride_two_shape() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[1, 1, 4, 4], vec![1.0; 16]);
    let w = t.constant(&[1, 1, 3, 3], vec![0.5; 9]).unwrap();
    let b = t.constant(&[1], vec![0.0]).unwrap();
    let y = t.conv2d(x, w, b, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);
}

#[test]
fn conv_channel_mismatch_names_axis() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[1, 2, 4, 4], vec![0.0; 32]);
    let w = t.constant(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
    let b = t.constant(&[1], vec![0.0]).unwrap();
    let err = t.conv2d(x, w, b, 1).unwrap_err();
    assert!(err.to_string().contains("input channels"), "{err}");
}

#[test]
fn softmax_symmetry_and_normalization() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[1, 2, 1, 1], vec![0.0, 0.0]);
    let p = t.softmax_channels(x).unwrap();
    assert!((t.data(p)[0] - 0.5).abs() < 1e-7);
    assert!((t.data(p)[1] - 0.5).abs() < 1e-7);
}

#[test]
fn instance_norm_constant_map_is_zero() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[1, 1, 3, 3], vec![4.2; 9]);
    let y = t.instance_norm(x, 1e-5).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn bilinear_corners_preserved() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let y = t.bilinear_upsample(x, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 4, 4]);
    let d = t.data(y);
    assert_eq!(d[0], 1.0);
    assert_eq!(d[3], 2.0);
    assert_eq!(d[12], 3.0);
    assert_eq!(d[15], 4.0);
    // Interior is the exact interpolant: row 0 is 1, 4/3, 5/3, 2.
    assert!((d[1] - 4.0 / 3.0).abs() < 1e-6);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[2], vec![1.0, 2.0]);
    let y = t.mul(x, x).unwrap();
    let loss = t.sum_all(y).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_unreached_grad_is_zero() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[3], vec![1.0, 2.0, 3.0]);
    let z = leaf32(&mut t, &[2], vec![5.0, 6.0]);
    let y = t.mul(z, z).unwrap();
    let loss = t.sum_all(y).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[2], vec![1.0, 2.0]);
    let y = t.mul(x, x).unwrap();
    assert!(t.backward(y).is_err());
}

#[test]
fn stop_gradient_detaches() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[2], vec![3.0, -1.5]);
    let d = t.stop_gradient(x);
    assert_eq!(t.data(d), t.data(x));
    assert!(t.is_leaf(d));
    assert!(!t.requires_grad(d));
    let y = t.mul(d, d).unwrap();
    let loss = t.sum_all(y).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn product_rule_with_detached_factor() {
    // y = x * stop_gradient(x) at x = 3 has dy/dx = 3, not 6.
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[1], vec![3.0]);
    let d = t.stop_gradient(x);
    let y = t.mul(x, d).unwrap();
    let loss = t.sum_all(y).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0]);
}

#[test]
fn dropout_p_zero_is_identity() {
    let mut t = Tape::<f32>::new();
    let mut rng = Rng64::seed_from(1);
    let x = leaf32(&mut t, &[8], (0..8).map(|i| i as f32).collect());
    let y = t.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(t.data(y), t.data(x));
}

#[test]
fn dropout_mask_reproducible() {
    let run = || {
        let mut t = Tape::<f32>::new();
        let mut rng = Rng64::seed_from(42);
        let x = t.leaf(&[64], vec![1.0; 64], false).unwrap();
        let y = t.dropout(x, 0.3, &mut rng).unwrap();
        t.data(y).to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.iter().any(|&v| v == 0.0));
}

#[test]
fn repeated_backward_is_bit_identical() {
    let run = || {
        let mut t = Tape::<f32>::new();
        let mut rng = Rng64::seed_from(9);
        let x = t
            .leaf(&[1, 2, 4, 4], (0..32).map(|i| (i as f32 * 0.37).sin()).collect(), true)
            .unwrap();
        let w = t
            .leaf(&[3, 2, 3, 3], (0..54).map(|i| (i as f32 * 0.11).cos() * 0.2).collect(), true)
            .unwrap();
        let b = t.leaf(&[3], vec![0.01, -0.02, 0.03], true).unwrap();
        let c = t.conv2d(x, w, b, 1).unwrap();
        let r = t.relu(c).unwrap();
        let d = t.dropout(r, 0.25, &mut rng).unwrap();
        let p = t.softmax_channels(d).unwrap();
        let loss = t.mean_all(p).unwrap();
        t.backward(loss).unwrap();
        (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec(), t.grad(b).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn huber_values() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&[3], vec![0.0, 1.0, 2.0], true).unwrap();
    let y = t.huber(x, 1.0).unwrap();
    let d = t.data(y);
    assert_eq!(d[0], 0.0);
    assert_eq!(d[1], 0.5); // knee: both branches agree
    assert_eq!(d[2], 1.5); // linear branch 1*2 - 0.5
}

#[test]
fn cross_entropy_uniform_and_ignore() {
    let mut t = Tape::<f64>::new();
    let logits = t.leaf(&[1, 5, 1, 2], vec![0.0; 10], true).unwrap();
    let labels = Array::from_vec(&[1, 1, 2], vec![3u8, ops::IGNORE_LABEL]).unwrap();
    let (loss, count) = t.cross_entropy_mean(logits, &labels).unwrap();
    assert_eq!(count, 1);
    assert!((t.item(loss).unwrap() - 5.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_all_ignored_is_zero() {
    let mut t = Tape::<f64>::new();
    let logits = t.leaf(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0], true).unwrap();
    let labels = Array::from_vec(&[1, 1, 1], vec![ops::IGNORE_LABEL]).unwrap();
    let (loss, count) = t.cross_entropy_mean(logits, &labels).unwrap();
    assert_eq!(count, 0);
    assert_eq!(t.item(loss).unwrap(), 0.0);
    t.backward(loss).unwrap();
    assert!(t.grad(logits).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut t = Tape::<f64>::new();
    let logits = t.leaf(&[1, 3, 1, 1], vec![0.0; 3], false).unwrap();
    let labels = Array::from_vec(&[1, 1, 1], vec![7u8]).unwrap();
    assert!(t.cross_entropy_mean(logits, &labels).is_err());
}

#[test]
fn non_finite_input_is_rejected() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[2], vec![f32::NAN, 1.0]);
    assert!(matches!(t.relu(x), Err(crate::error::Error::NonFinite { .. })));
    let y = leaf32(&mut t, &[2], vec![1.0, f32::INFINITY]);
    let z = leaf32(&mut t, &[2], vec![1.0, 1.0]);
    assert!(t.add(y, z).is_err());
}

#[test]
fn matmul_and_transpose_shapes() {
    let mut t = Tape::<f32>::new();
    let a = leaf32(&mut t, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = leaf32(&mut t, &[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.shape(c), &[2, 2]);
    assert_eq!(t.data(c), &[4.0, 5.0, 10.0, 11.0]);
    let ct = t.transpose(c).unwrap();
    assert_eq!(t.data(ct), &[4.0, 10.0, 5.0, 11.0]);
}

#[test]
fn flatten_unflatten_round_trip() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[2, 3, 2, 2], (0..24).map(|i| i as f32).collect());
    let f = t.flatten_spatial(x).unwrap();
    assert_eq!(t.shape(f), &[8, 3]);
    // token 0 of sample 0 carries channels (0, 4, 8)
    assert_eq!(&t.data(f)[..3], &[0.0, 4.0, 8.0]);
    let u = t.unflatten_spatial(f, 2, 3, 2, 2).unwrap();
    assert_eq!(t.data(u), t.data(x));
}

#[test]
fn avg_pool_rejects_odd_extent() {
    let mut t = Tape::<f32>::new();
    let x = leaf32(&mut t, &[1, 1, 3, 4], vec![0.0; 12]);
    assert!(t.avg_pool2d(x).is_err());
}

// ── finite differences on every differentiable op ────────────────────

fn fd_ok<B>(inputs: &[CheckInput], build: B)
where
    B: Fn(&mut Tape<f64>, &[TensorRef]) -> crate::error::Result<TensorRef>,
{
    if let Err(e) = finite_diff_check(inputs, build, DEFAULT_STEP, DEFAULT_TOL) {
        panic!("finite-difference check failed: {e}");
    }
}

#[test]
fn fd_elementwise_ops() {
    let mut rng = Rng64::seed_from(100);
    let a = CheckInput::uniform(&[2, 3], &mut rng, -2.0, 2.0);
    let b = CheckInput::uniform(&[2, 3], &mut rng, -2.0, 2.0);
    fd_ok(&[a.clone(), b.clone()], |t, r| {
        let s = t.add(r[0], r[1])?;
        let m = t.mul(s, r[0])?;
        let d = t.sub(m, r[1])?;
        let sc = t.mul_scalar(d, 0.7)?;
        t.sum_all(sc)
    });
    let x = CheckInput::uniform_avoiding(&[3, 3], &mut rng, -2.0, 2.0, &[0.0], 0.05);
    fd_ok(&[x], |t, r| {
        let y = t.relu(r[0])?;
        t.mean_all(y)
    });
    let h = CheckInput::uniform_avoiding(&[8], &mut rng, -3.0, 3.0, &[-1.0, 1.0], 0.05);
    fd_ok(&[h], |t, r| {
        let y = t.huber(r[0], 1.0)?;
        t.sum_all(y)
    });
}

#[test]
fn fd_conv_and_pool() {
    let mut rng = Rng64::seed_from(101);
    let x = CheckInput::uniform(&[2, 2, 4, 4], &mut rng, -1.0, 1.0);
    let w = CheckInput::uniform(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
    let b = CheckInput::uniform(&[3], &mut rng, -0.2, 0.2);
    for stride in [1, 2] {
        fd_ok(&[x.clone(), w.clone(), b.clone()], move |t, r| {
            let y = t.conv2d(r[0], r[1], r[2], stride)?;
            t.mean_all(y)
        });
    }
    let p = CheckInput::uniform(&[1, 2, 4, 4], &mut rng, -1.0, 1.0);
    fd_ok(&[p], |t, r| {
        let y = t.avg_pool2d(r[0])?;
        t.sum_all(y)
    });
}

#[test]
fn fd_softmax_norm_upsample() {
    let mut rng = Rng64::seed_from(102);
    let x = CheckInput::uniform(&[1, 3, 2, 2], &mut rng, -2.0, 2.0);
    fd_ok(&[x], |t, r| {
        let p = t.softmax_channels(r[0])?;
        let sq = t.mul(p, p)?;
        t.sum_all(sq)
    });
    let x2 = CheckInput::uniform(&[4, 5], &mut rng, -2.0, 2.0);
    fd_ok(&[x2], |t, r| {
        let p = t.softmax_rows(r[0])?;
        let sq = t.mul(p, p)?;
        t.sum_all(sq)
    });
    let n = CheckInput::uniform(&[2, 2, 3, 3], &mut rng, -2.0, 2.0);
    fd_ok(&[n], |t, r| {
        let y = t.instance_norm(r[0], 1e-5)?;
        let sq = t.mul(y, y)?;
        let c = t.constant(&[2, 2, 3, 3], (0..36).map(|i| (i % 5) as f64 * 0.2).collect())?;
        let m = t.mul(sq, c)?;
        t.sum_all(m)
    });
    let u = CheckInput::uniform(&[1, 2, 2, 3], &mut rng, -1.0, 1.0);
    fd_ok(&[u], |t, r| {
        let y = t.bilinear_upsample(r[0], 2)?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    });
}

#[test]
fn fd_dropout_fixed_mask() {
    let mut rng = Rng64::seed_from(103);
    let x = CheckInput::uniform(&[3, 4], &mut rng, -1.0, 1.0);
    fd_ok(&[x], |t, r| {
        let mut mask_rng = Rng64::seed_from(7);
        let y = t.dropout(r[0], 0.4, &mut mask_rng)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
}

#[test]
fn fd_matmul_layout_and_ce() {
    let mut rng = Rng64::seed_from(104);
    let a = CheckInput::uniform(&[3, 4], &mut rng, -1.0, 1.0);
    let b = CheckInput::uniform(&[4, 2], &mut rng, -1.0, 1.0);
    fd_ok(&[a, b], |t, r| {
        let c = t.matmul(r[0], r[1])?;
        let ct = t.transpose(c)?;
        let sq = t.mul(ct, ct)?;
        t.sum_all(sq)
    });
    let x = CheckInput::uniform(&[2, 3, 2, 2], &mut rng, -1.0, 1.0);
    fd_ok(&[x], |t, r| {
        let f = t.flatten_spatial(r[0])?;
        let s1 = t.slice_rows(f, 1, 4)?;
        let s2 = t.slice_cols(f, 0, 2)?;
        let s3 = t.slice_cols(f, 2, 1)?;
        let cc = t.concat_cols(s2, s3)?;
        let rr = t.concat_rows(s1, s1)?;
        let m1 = t.sum_all(cc)?;
        let m2 = t.sum_all(rr)?;
        let u = t.unflatten_spatial(f, 2, 3, 2, 2)?;
        let sq = t.mul(u, u)?;
        let m3 = t.sum_all(sq)?;
        let s = t.add(m1, m2)?;
        t.add(s, m3)
    });
    let logits = CheckInput::uniform(&[1, 4, 2, 2], &mut rng, -2.0, 2.0);
    fd_ok(&[logits], |t, r| {
        let labels = Array::from_vec(&[1, 2, 2], vec![0u8, 3, ops::IGNORE_LABEL, 1]).unwrap();
        let (loss, _) = t.cross_entropy_mean(r[0], &labels)?;
        Ok(loss)
    });
    let rows = CheckInput::uniform(&[3, 2], &mut rng, -1.0, 1.0);
    let bias = CheckInput::uniform(&[2], &mut rng, -1.0, 1.0);
    fd_ok(&[rows, bias], |t, r| {
        let y = t.add_bias(r[0], r[1])?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
}

#[test]
fn fd_mean_channels() {
    let mut rng = Rng64::seed_from(105);
    let x = CheckInput::uniform(&[2, 3, 2, 2], &mut rng, -1.0, 1.0);
    fd_ok(&[x], |t, r| {
        let m = t.mean_channels(r[0])?;
        let sq = t.mul(m, m)?;
        t.sum_all(sq)
    });
}
