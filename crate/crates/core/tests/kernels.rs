mod common;

use hegemony::enc_tensor::*;
use hegemony::he::sim::{SimBackend, SimDecryptor};
use hegemony::he::{HeBackend, HeDecryptor, HeError, SlotLayout, SlotSet};
use hegemony::he::HeVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sim() -> SimBackend {
    SimBackend::new(4096, 8).unwrap()
}

#[test]
fn diagonalize_pads_rectangular() {
    let a = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
    let d = diagonalize(&a);
    assert_eq!(d.size(), 3);
    assert_eq!(d.original_shape, (2, 3));
    assert_eq!(d.rows, vec![vec![1.0, 5.0, 0.0], vec![2.0, 6.0, 0.0], vec![3.0, 4.0, 0.0]]);
}

#[test]
fn diagonalize_inverse_map_recovers_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = common::random_matrix(&mut rng, 8, 8);
        let d = diagonalize(&a);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(d.rows[(c + 8 - r) % 8][r], a[r][c]);
            }
        }
    }
}

#[test]
fn matvec_matches_oracle_exactly() {
    let be = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..25 {
        let (rows, cols) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let a = common::random_matrix(&mut rng, rows, cols);
        let x = common::random_vec(&mut rng, cols);
        let enc = be.encrypt_vec(&x).unwrap();
        let y = matvec(&be, &diagonalize(&a), &enc).unwrap();
        assert_eq!(y.level(), enc.level() - 1);
        let got = SimDecryptor.decrypt_vec(&be, &y).unwrap();
        assert_eq!(&got[..rows], &common::matvec(&a, &x)[..]);
        assert!(got[rows..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn matvec_trivial_matrices() {
    let be = sim();
    let x = vec![0.5, -1.0, 2.0, 0.25];
    let enc = be.encrypt_vec(&x).unwrap();
    let id: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
    let y = matvec(&be, &diagonalize(&id), &enc).unwrap();
    assert_eq!(&SimDecryptor.decrypt_vec(&be, &y).unwrap()[..4], &x[..]);
    let y = matvec(&be, &diagonalize(&vec![vec![0.0; 4]; 4]), &enc).unwrap();
    assert!(SimDecryptor.decrypt_vec(&be, &y).unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(y.level(), 7);
}

#[test]
fn toeplitz_rows_are_sliding_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let k = rng.gen_range(1..=5);
        let stride = rng.gen_range(1..=4);
        let width = rng.gen_range(k..=20);
        let f = common::random_vec(&mut rng, k);
        let x = common::random_vec(&mut rng, width);
        let t = toeplitz_from_filter(&f, width, stride);
        assert_eq!(t.len(), (width - k) / stride + 1);
        let direct: Vec<f64> =
            (0..t.len()).map(|r| (0..k).map(|i| f[i] * x[r * stride + i]).sum()).collect();
        assert_eq!(common::matvec(&t, &x), direct);
    }
    assert_eq!(toeplitz_from_filter(&[1.0], 3, 1), vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
}

fn check_conv(be: &SimBackend, img: &Image, f: &ConvFilters) {
    let enc = encrypt_image(be, img).unwrap();
    let out = conv2d(be, f, &enc).unwrap();
    assert_eq!(out.level(), enc.level() - 1);
    assert_eq!(decrypt_image(&SimDecryptor, be, &out).unwrap(), common::conv(img, f));
    for row in &out.rows {
        assert!(!row.layout().pending_mask());
    }
}

#[test]
fn conv2d_matches_oracle_exactly() {
    let be = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..25 {
        let (h, w, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=3));
        let kh = rng.gen_range(1..=h.min(5));
        let kw = rng.gen_range(1..=w.min(5));
        let (cout, stride) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let f = common::random_filters(&mut rng, kh, kw, c, cout, stride);
        check_conv(&be, &common::random_image(&mut rng, h, w, c), &f);
    }
}

#[test]
fn conv2d_named_geometries() {
    let be = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_conv(&be, &common::random_image(&mut rng, 6, 6, 1), &common::random_filters(&mut rng, 2, 2, 1, 1, 1));
    check_conv(&be, &common::random_image(&mut rng, 16, 16, 2), &common::random_filters(&mut rng, 5, 5, 2, 3, 4));

    let img = common::random_image(&mut rng, 5, 7, 1);
    let mut one = ConvFilters::zeros(1, 1, 1, 1, 1);
    one.weights[0] = 1.0;
    let out = conv2d(&be, &one, &encrypt_image(&be, &img).unwrap()).unwrap();
    assert_eq!(decrypt_image(&SimDecryptor, &be, &out).unwrap(), img);
    one.stride = 2;
    let out = conv2d(&be, &one, &encrypt_image(&be, &img).unwrap()).unwrap();
    let got = decrypt_image(&SimDecryptor, &be, &out).unwrap();
    assert_eq!((got.height, got.width), (3, 4));
    assert_eq!(got.get(2, 3, 0), img.get(4, 6, 0));
}

#[test]
fn conv2d_rejects_oversized_filter_and_empty_budget() {
    let be = SimBackend::new(256, 1).unwrap();
    let img = Image::zeros(3, 3, 1);
    let enc = encrypt_image(&be, &img).unwrap();
    let f = ConvFilters::zeros(4, 1, 1, 1, 1);
    assert!(matches!(conv2d(&be, &f, &enc), Err(HeError::GeometryMismatch(_))));
    let f = ConvFilters::zeros(1, 1, 1, 1, 1);
    let once = conv2d(&be, &f, &enc).unwrap();
    assert!(matches!(conv2d(&be, &f, &once), Err(HeError::BudgetExhausted { .. })));
}

#[test]
fn square_activation_squares_and_costs_a_level_each() {
    let be = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = common::random_image(&mut rng, 4, 5, 2);
    let enc = encrypt_image(&be, &img).unwrap();
    let once = square_activation(&be, &enc).unwrap();
    assert_eq!(decrypt_image(&SimDecryptor, &be, &once).unwrap(), common::square(&img));
    let twice = square_activation(&be, &once).unwrap();
    let fourth: Vec<f64> = img.data.iter().map(|v| v.powi(4)).collect();
    assert_eq!(decrypt_image(&SimDecryptor, &be, &twice).unwrap().data, fourth);
    assert_eq!(twice.level(), enc.level() - 2);
    let zeros = encrypt_image(&be, &Image::zeros(2, 2, 1)).unwrap();
    assert!(decrypt_image(&SimDecryptor, &be, &square_activation(&be, &zeros).unwrap()).unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn gap_sums_channels_without_levels() {
    let be = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..25 {
        let (h, w, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=3));
        let img = common::random_image(&mut rng, h, w, c);
        let enc = encrypt_image(&be, &img).unwrap();
        let g = global_avg_pool(&be, &enc).unwrap();
        assert_eq!(g.level(), enc.level());
        assert_eq!(g.layout().pending_scale, 1.0 / (h * w) as f64);
        let v = SimDecryptor.decrypt_vec(&be, &g).unwrap();
        let bases: Vec<f64> = (0..c).map(|k| v[k * w]).collect();
        assert_eq!(bases, common::channel_sums(&img));
        assert_eq!(g.layout().valid, SlotSet::from_indices(4096, (0..c).map(|k| k * w)));
        assert_eq!(g.layout().pending_mask(), w > 1);
    }
    let img = common::random_image(&mut rng, 1, 1, 1);
    let g = global_avg_pool(&be, &encrypt_image(&be, &img).unwrap()).unwrap();
    assert_eq!(g.layout().pending_scale, 1.0);
    assert_eq!(SimDecryptor.decrypt_vec(&be, &g).unwrap()[0], img.data[0]);
}

#[test]
fn dense_after_gap_matches_mean_pooled_oracle() {
    let be = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..25 {
        // Power-of-two areas keep the folded divisor exact.
        let (h, w) = (1usize << rng.gen_range(0..=4), 1usize << rng.gen_range(0..=4));
        let c = rng.gen_range(1..=3);
        let classes = rng.gen_range(1..=10);
        let img = common::random_image(&mut rng, h, w, c);
        let wts = common::random_matrix(&mut rng, classes, c);
        let bias = common::random_vec(&mut rng, classes);
        let g = global_avg_pool(&be, &encrypt_image(&be, &img).unwrap()).unwrap();
        let y = dense_with_fold(&be, &common::slot_weights(&wts, w), &bias, &g).unwrap();
        assert_eq!(y.level(), g.level() - 1);
        assert_eq!(y.layout().pending_scale, 1.0);
        assert!(!y.layout().pending_mask());
        let got = SimDecryptor.decrypt_vec(&be, &y).unwrap();
        assert_eq!(&got[..classes], &common::dense(&wts, &bias, &common::channel_means(&img))[..]);
    }
}

#[test]
fn dense_fold_on_constant_image_and_odd_area() {
    let be = sim();
    let img = Image::new(3, 3, 2, (0..18).map(|i| if i % 2 == 0 { 0.75 } else { -2.0 }).collect()).unwrap();
    let g = global_avg_pool(&be, &encrypt_image(&be, &img).unwrap()).unwrap();
    let id = common::slot_weights(&[vec![1.0, 0.0], vec![0.0, 1.0]], 3);
    let y = dense_with_fold(&be, &id, &[0.0, 0.0], &g).unwrap();
    let got = SimDecryptor.decrypt_vec(&be, &y).unwrap();
    assert!((got[0] - 0.75).abs() < 1e-12 && (got[1] + 2.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = common::random_image(&mut rng, 7, 7, 3);
    let wts = common::random_matrix(&mut rng, 4, 3);
    let bias = common::random_vec(&mut rng, 4);
    let g = global_avg_pool(&be, &encrypt_image(&be, &img).unwrap()).unwrap();
    let y = dense_with_fold(&be, &common::slot_weights(&wts, 7), &bias, &g).unwrap();
    let got = SimDecryptor.decrypt_vec(&be, &y).unwrap();
    let want = common::dense(&wts, &bias, &common::channel_means(&img));
    assert!(common::max_abs_diff(&got[..4], &want) < 1e-12);
}

#[test]
fn dense_identity_without_pending_state() {
    let be = sim();
    let x = be.encrypt_vec(&[1.5, -0.5, 3.0]).unwrap();
    let id: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
    let y = dense_with_fold(&be, &id, &[0.0; 3], &x).unwrap();
    assert_eq!(&SimDecryptor.decrypt_vec(&be, &y).unwrap()[..3], &[1.5, -0.5, 3.0]);
}

#[test]
fn two_and_three_conv_ledgers() {
    let be = SimBackend::new(4096, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = common::random_image(&mut rng, 16, 16, 1);
    let mut x = encrypt_image(&be, &img).unwrap();
    let start = x.level();
    for (cin, cout) in [(1, 2), (2, 2), (2, 2)] {
        x = conv2d(&be, &common::random_filters(&mut rng, 2, 2, cin, cout, 2), &x).unwrap();
        x = square_activation(&be, &x).unwrap();
    }
    let g = global_avg_pool(&be, &x).unwrap();
    assert_eq!(start - g.level(), 6);
    let y = dense_with_fold(&be, &common::slot_weights(&common::random_matrix(&mut rng, 2, 2), x.channel_stride), &[0.0; 2], &g).unwrap();
    assert_eq!(start - y.level(), 7);
    assert_eq!(y.level(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Folding the pending scale and mask into the weights equals masking
    /// and scaling the input in the clear.
    #[test]
    fn fold_equals_mask_then_dense(
        seed in any::<u64>(),
        n in 1usize..24,
        rows in 1usize..8,
        scale_exp in 0i32..6,
    ) {
        let be = SimBackend::new(128, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = common::random_vec(&mut rng, n);
        let valid = SlotSet::from_indices(128, (0..n).filter(|_| rng.gen_bool(0.6)));
        let layout = SlotLayout {
            valid: valid.clone(),
            support: SlotSet::range(128, 0, n),
            pending_scale: 2f64.powi(-scale_exp),
        };
        let x = HeVector::assemble(be.encrypt_raw(&values).unwrap(), 2, layout.clone());
        let w = common::random_matrix(&mut rng, rows, n);
        let b = common::random_vec(&mut rng, rows);
        let y = dense_with_fold(&be, &w, &b, &x).unwrap();
        let masked: Vec<f64> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| if valid.contains(i) { v * layout.pending_scale } else { 0.0 })
            .collect();
        let got = SimDecryptor.decrypt_vec(&be, &y).unwrap();
        prop_assert_eq!(&got[..rows], &common::dense(&w, &b, &masked)[..]);
        prop_assert_eq!(y.layout().pending_scale, 1.0);
    }

    /// Planned rotation steps cover every step the kernels issue.
    #[test]
    fn planned_rotations_cover_kernel_use(
        seed in any::<u64>(),
        h in 2usize..10,
        w in 2usize..10,
        c in 1usize..3,
        k in 1usize..3,
        stride in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::random_filters(&mut rng, k.min(h), k.min(w), c, 2, stride);
        let (steps, out) = conv2d_rotations(&f, RowGeometry::packed(h, w, c), 256).unwrap();
        let be = RecordingSim::new(256);
        let enc = encrypt_image(&be, &common::random_image(&mut rng, h, w, c)).unwrap();
        let y = conv2d(&be, &f, &enc).unwrap();
        prop_assert_eq!(y.geometry(), out);
        let mut all = steps;
        let pooled = gap_layout(&out.row_layout(256), out);
        all.extend(gap_rotations(out));
        all.extend(dense_rotations(3, (out.channels - 1) * out.channel_stride + 1, &pooled));
        let g = global_avg_pool(&be, &y).unwrap();
        prop_assert_eq!(g.layout(), &pooled);
        let wts = common::slot_weights(&common::random_matrix(&mut rng, 3, out.channels), out.channel_stride);
        dense_with_fold(&be, &wts, &[0.0; 3], &g).unwrap();
        let used = be.used.lock().unwrap();
        prop_assert!(used.is_subset(&all), "used {:?} planned {:?}", used, all);
    }
}

/// Simulator that records every rotation step.
struct RecordingSim {
    inner: SimBackend,
    used: std::sync::Mutex<std::collections::BTreeSet<usize>>,
}

impl RecordingSim {
    fn new(slots: usize) -> Self {
        Self { inner: SimBackend::new(slots, 8).unwrap(), used: Default::default() }
    }
}

impl HeBackend for RecordingSim {
    type Ciphertext = <SimBackend as HeBackend>::Ciphertext;
    type Plaintext = <SimBackend as HeBackend>::Plaintext;
    type Product = <SimBackend as HeBackend>::Product;

    fn slot_count(&self) -> usize {
        self.inner.slot_count()
    }
    fn max_level(&self) -> usize {
        self.inner.max_level()
    }
    fn encrypt_raw(&self, v: &[f64]) -> Result<Self::Ciphertext, HeError> {
        self.inner.encrypt_raw(v)
    }
    fn encode_raw(&self, v: &[f64], level: usize) -> Result<Self::Plaintext, HeError> {
        self.inner.encode_raw(v, level)
    }
    fn add_raw(&self, a: &Self::Ciphertext, b: &Self::Ciphertext) -> Result<Self::Ciphertext, HeError> {
        self.inner.add_raw(a, b)
    }
    fn add_plain_raw(&self, a: &Self::Ciphertext, v: &[f64]) -> Result<Self::Ciphertext, HeError> {
        self.inner.add_plain_raw(a, v)
    }
    fn rotate_raw(&self, a: &Self::Ciphertext, steps: usize) -> Result<Self::Ciphertext, HeError> {
        self.used.lock().unwrap().insert(steps);
        self.inner.rotate_raw(a, steps)
    }
    fn square_raw(&self, a: &Self::Ciphertext) -> Result<Self::Ciphertext, HeError> {
        self.inner.square_raw(a)
    }
    fn mul_acc_raw(&self, acc: &mut Option<Self::Product>, a: &Self::Ciphertext, p: &Self::Plaintext) -> Result<(), HeError> {
        self.inner.mul_acc_raw(acc, a, p)
    }
    fn finish_raw(&self, acc: Self::Product) -> Result<Self::Ciphertext, HeError> {
        self.inner.finish_raw(acc)
    }
}
