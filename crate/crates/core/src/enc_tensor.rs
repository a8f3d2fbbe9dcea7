//! Encrypted tensor kernels over any [`HeBackend`]: diagonal-order
//! matrix-vector products, row-encoded 2D convolution, square activation,
//! global average pooling, and a dense layer that absorbs pending masks
//! and scales into its cleartext weights.
//!
//! Images are encoded one ciphertext per row. Within a row, channel `c`
//! occupies slots `c * channel_stride .. c * channel_stride + width`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::he::{HeBackend, HeDecryptor, HeError, HeVector, SlotLayout, SlotSet};

/// Dense diagonal form of a zero-padded square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagMatrix {
    /// `rows[i][j] = A[j][(j + i) % size]`
    pub rows: Vec<Vec<f64>>,
    pub original_shape: (usize, usize),
}

impl DiagMatrix {
    pub fn size(&self) -> usize {
        self.rows.len()
    }

    fn to_sparse(&self) -> SparseDiags {
        let (rows, _) = self.original_shape;
        let diags = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, v)| v.iter().any(|&x| x != 0.0))
            .map(|(d, v)| (d, v[..rows].to_vec()))
            .collect();
        SparseDiags { size: self.size(), rows, diags }
    }
}

/// Diagonalize with the smallest square padding.
pub fn diagonalize(a: &[Vec<f64>]) -> DiagMatrix {
    let (rows, cols) = shape(a);
    diagonalize_padded(a, rows.max(cols))
}

/// Diagonalize after zero-padding to `size x size`; `size` must cover
/// both dimensions.
pub fn diagonalize_padded(a: &[Vec<f64>], size: usize) -> DiagMatrix {
    let (rows, cols) = shape(a);
    assert!(size >= rows && size >= cols, "padding {size} smaller than {rows}x{cols}");
    let at = |r: usize, c: usize| if r < rows && c < cols { a[r][c] } else { 0.0 };
    let diag_rows = (0..size).map(|i| (0..size).map(|j| at(j, (j + i) % size)).collect()).collect();
    DiagMatrix { rows: diag_rows, original_shape: (rows, cols) }
}

fn shape(a: &[Vec<f64>]) -> (usize, usize) {
    let cols = a.first().map_or(0, Vec::len);
    assert!(a.iter().all(|r| r.len() == cols), "ragged matrix");
    (a.len(), cols)
}

/// Nonzero diagonals only, truncated to the unpadded row count.
#[derive(Debug, Clone)]
struct SparseDiags {
    size: usize,
    rows: usize,
    diags: BTreeMap<usize, Vec<f64>>,
}

impl SparseDiags {
    fn from_entries(size: usize, rows: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut diags: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (r, c, v) in entries {
            if v != 0.0 {
                let d = (c + size - r) % size;
                diags.entry(d).or_insert_with(|| vec![0.0; rows])[r] += v;
            }
        }
        Self { size, rows, diags }
    }

    fn columns(&self) -> BTreeSet<usize> {
        let mut cols = BTreeSet::new();
        for (&d, v) in &self.diags {
            cols.extend(v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(j, _)| (j + d) % self.size));
        }
        cols
    }
}

/// Check that doubling `x` by a copy shifted up by `size` makes every
/// wrapped read of a used column see the real value.
fn check_doubling(layout: &SlotLayout, columns: &BTreeSet<usize>, size: usize, slots: usize) -> Result<(), HeError> {
    if 2 * size > slots {
        return Err(HeError::LayoutMismatch(format!("padded size {size} needs {} slots, have {slots}", 2 * size)));
    }
    for &c in columns {
        if layout.support.contains(c) && !layout.valid.contains(c) {
            return Err(HeError::LayoutMismatch(format!("column {c} reads a garbage slot")));
        }
        if layout.support.contains(c + size) || layout.support.contains((c + slots - size) % slots) {
            return Err(HeError::LayoutMismatch(format!("column {c} would alias nonzero slots {size} apart")));
        }
    }
    Ok(())
}

fn doubled<B: HeBackend>(backend: &B, x: &B::Ciphertext, size: usize) -> Result<B::Ciphertext, HeError> {
    let shifted = backend.rotate_raw(x, backend.slot_count() - size)?;
    backend.add_raw(x, &shifted)
}

/// Rotations of `x` by each step in `steps` (0 included), keyed by step.
fn rotations<B: HeBackend>(
    backend: &B,
    x: B::Ciphertext,
    steps: &BTreeSet<usize>,
) -> Result<BTreeMap<usize, B::Ciphertext>, HeError> {
    let nonzero: Vec<usize> = steps.iter().copied().filter(|&s| s != 0).collect();
    let rotated = backend.rotate_many_raw(&x, &nonzero)?;
    let mut out: BTreeMap<usize, B::Ciphertext> = nonzero.into_iter().zip(rotated).collect();
    if steps.contains(&0) {
        out.insert(0, x);
    }
    Ok(out)
}

/// Rotation keys a matvec by `a` needs on a backend with `slots` slots.
pub fn matvec_rotations(a: &DiagMatrix, slots: usize) -> BTreeSet<usize> {
    sparse_rotations(&a.to_sparse(), slots)
}

fn sparse_rotations(a: &SparseDiags, slots: usize) -> BTreeSet<usize> {
    let mut steps: BTreeSet<usize> = a.diags.keys().copied().filter(|&d| d != 0).collect();
    steps.insert(slots - a.size);
    steps
}

/// `A x` in slots `0..rows`, one level consumed.
pub fn matvec<B: HeBackend>(
    backend: &B,
    a: &DiagMatrix,
    x: &HeVector<B::Ciphertext>,
) -> Result<HeVector<B::Ciphertext>, HeError> {
    matvec_sparse(backend, &a.to_sparse(), x, x.layout().pending_scale)
}

fn matvec_sparse<B: HeBackend>(
    backend: &B,
    a: &SparseDiags,
    x: &HeVector<B::Ciphertext>,
    pending_out: f64,
) -> Result<HeVector<B::Ciphertext>, HeError> {
    let level = x.level();
    if level == 0 {
        return Err(HeError::budget("matvec"));
    }
    let slots = backend.slot_count();
    check_doubling(x.layout(), &a.columns(), a.size, slots)?;
    let mut diags: Vec<(usize, &[f64])> = a.diags.iter().map(|(&d, v)| (d, v.as_slice())).collect();
    let zero = vec![0.0; a.rows];
    if diags.is_empty() {
        diags.push((0, &zero));
    }
    let steps = diags.iter().map(|&(d, _)| d).collect();
    let rot = rotations(backend, doubled(backend, x.ciphertext(), a.size)?, &steps)?;
    let mut acc = None;
    for (d, v) in diags {
        let p = backend.encode_raw(v, level)?;
        backend.mul_acc_raw(&mut acc, &rot[&d], &p)?;
    }
    let ct = backend.finish_raw(acc.expect("at least one diagonal"))?;
    let valid = SlotSet::range(slots, 0, a.rows);
    let layout = SlotLayout { support: valid.clone(), valid, pending_scale: pending_out };
    Ok(HeVector::from_parts(ct, level - 1, layout))
}

/// Row `r` holds `filter_row` starting at column `r * stride`.
pub fn toeplitz_from_filter(filter_row: &[f64], in_width: usize, stride: usize) -> Vec<Vec<f64>> {
    assert!(stride > 0 && !filter_row.is_empty() && in_width >= filter_row.len());
    let out_width = (in_width - filter_row.len()) / stride + 1;
    (0..out_width)
        .map(|r| {
            let mut row = vec![0.0; in_width];
            row[r * stride..r * stride + filter_row.len()].copy_from_slice(filter_row);
            row
        })
        .collect()
}

/// Cleartext image, indexed `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, HeError> {
        if data.len() != height * width * channels {
            return Err(HeError::GeometryMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Slot vector of row `y` with channel blocks `channel_stride` apart.
    pub fn row_slots(&self, y: usize, channel_stride: usize) -> Vec<f64> {
        let mut v = vec![0.0; channel_stride * (self.channels - 1) + self.width];
        for c in 0..self.channels {
            for x in 0..self.width {
                v[c * channel_stride + x] = self.get(y, x, c);
            }
        }
        v
    }
}

/// Filter bank: `weights[((j * width + x) * in_channels + ci) * out_channels + k]`
/// is the tap at filter row `j`, column `x`, from input channel `ci` to
/// output channel `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvFilters {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub stride: usize,
    pub bias: Vec<f64>,
}

impl ConvFilters {
    pub fn zeros(height: usize, width: usize, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            in_channels,
            out_channels,
            weights: vec![0.0; height * width * in_channels * out_channels],
            stride,
            bias: vec![0.0; out_channels],
        }
    }

    fn index(&self, j: usize, x: usize, ci: usize, k: usize) -> usize {
        ((j * self.width + x) * self.in_channels + ci) * self.out_channels + k
    }

    pub fn weight(&self, j: usize, x: usize, ci: usize, k: usize) -> f64 {
        self.weights[self.index(j, x, ci, k)]
    }

    pub fn set_weight(&mut self, j: usize, x: usize, ci: usize, k: usize, v: f64) {
        let i = self.index(j, x, ci, k);
        self.weights[i] = v;
    }

    pub fn validate(&self) -> Result<(), HeError> {
        let n = self.height * self.width * self.in_channels * self.out_channels;
        if self.stride == 0 || n == 0 || self.weights.len() != n || self.bias.len() != self.out_channels {
            return Err(HeError::GeometryMismatch(format!(
                "filter bank {}x{}x{}x{} stride {} with {} weights and {} biases",
                self.height,
                self.width,
                self.in_channels,
                self.out_channels,
                self.stride,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    /// Output `(height, width)` for an input of the given size.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize), HeError> {
        if self.height > height || self.width > width {
            return Err(HeError::GeometryMismatch(format!(
                "{}x{} filter on a {height}x{width} image",
                self.height, self.width
            )));
        }
        Ok(((height - self.height) / self.stride + 1, (width - self.width) / self.stride + 1))
    }
}

/// Row geometry of an encoded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub channel_stride: usize,
}

impl RowGeometry {
    /// Contiguous channel blocks.
    pub fn packed(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, channel_stride: width }
    }

    pub fn row_len(&self) -> usize {
        self.channel_stride * (self.channels - 1) + self.width
    }

    pub fn row_layout(&self, slots: usize) -> SlotLayout {
        let valid = SlotSet::from_indices(
            slots,
            (0..self.channels).flat_map(|c| (0..self.width).map(move |x| c * self.channel_stride + x)),
        );
        SlotLayout { support: valid.clone(), valid, pending_scale: 1.0 }
    }
}

/// An image encrypted one ciphertext per row.
#[derive(Debug, Clone)]
pub struct EncImage<C> {
    pub rows: Vec<HeVector<C>>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub channel_stride: usize,
}

impl<C> EncImage<C> {
    pub fn geometry(&self) -> RowGeometry {
        RowGeometry {
            height: self.height,
            width: self.width,
            channels: self.channels,
            channel_stride: self.channel_stride,
        }
    }

    /// Lowest level among the rows.
    pub fn level(&self) -> usize {
        self.rows.iter().map(HeVector::level).min().unwrap_or(0)
    }
}

/// Encrypt `image` row by row with contiguous channel blocks.
pub fn encrypt_image<B: HeBackend>(backend: &B, image: &Image) -> Result<EncImage<B::Ciphertext>, HeError> {
    let geom = RowGeometry::packed(image.height, image.width, image.channels);
    if geom.row_len() > backend.slot_count() {
        return Err(HeError::TooManyValues { got: geom.row_len(), slots: backend.slot_count() });
    }
    let rows = (0..image.height)
        .into_par_iter()
        .map(|y| backend.encrypt_vec(&image.row_slots(y, geom.channel_stride)))
        .collect::<Result<_, _>>()?;
    Ok(EncImage {
        rows,
        height: image.height,
        width: image.width,
        channels: image.channels,
        channel_stride: geom.channel_stride,
    })
}

/// Decrypt every row, applying each row's pending scale.
pub fn decrypt_image<B, D>(dec: &D, backend: &B, image: &EncImage<B::Ciphertext>) -> Result<Image, HeError>
where
    B: HeBackend,
    D: HeDecryptor<B>,
{
    let mut out = Image::zeros(image.height, image.width, image.channels);
    for (y, row) in image.rows.iter().enumerate() {
        let v = dec.decrypt_vec(backend, row)?;
        let s = row.layout().pending_scale;
        for c in 0..image.channels {
            for x in 0..image.width {
                out.set(y, x, c, v[c * image.channel_stride + x] * s);
            }
        }
    }
    Ok(out)
}

/// Shape bookkeeping for one convolution, shared by the kernel and the
/// rotation-key planner so both agree on diagonals.
#[derive(Debug, Clone)]
struct ConvPlan {
    input: RowGeometry,
    out_height: usize,
    out_width: usize,
    /// Padded size of every widened Toeplitz matrix.
    size: usize,
}

impl ConvPlan {
    fn new(filters: &ConvFilters, input: RowGeometry, slots: usize) -> Result<Self, HeError> {
        filters.validate()?;
        if filters.in_channels != input.channels {
            return Err(HeError::GeometryMismatch(format!(
                "{} input channels for filters expecting {}",
                input.channels, filters.in_channels
            )));
        }
        let (out_height, out_width) = filters.output_size(input.height, input.width)?;
        let size = out_width.max(input.row_len());
        if filters.out_channels * out_width > slots || 2 * size > slots {
            return Err(HeError::GeometryMismatch(format!(
                "convolution output of {} channels x {out_width} wide does not fit {slots} slots",
                filters.out_channels
            )));
        }
        Ok(Self { input, out_height, out_width, size })
    }

    fn output(&self, filters: &ConvFilters) -> RowGeometry {
        RowGeometry {
            height: self.out_height,
            width: self.out_width,
            channels: filters.out_channels,
            channel_stride: self.out_width,
        }
    }

    /// Entries of the widened Toeplitz matrix for filter row `j` and
    /// output channel `k`: output column `r` reads input slot
    /// `ci * channel_stride + r * stride + x` with tap `(j, x, ci, k)`.
    fn entries<'a>(
        &'a self,
        filters: &'a ConvFilters,
        j: usize,
        k: usize,
    ) -> impl Iterator<Item = (usize, usize, f64)> + 'a {
        (0..self.out_width).flat_map(move |r| {
            (0..filters.in_channels).flat_map(move |ci| {
                (0..filters.width).map(move |x| {
                    (r, ci * self.input.channel_stride + r * filters.stride + x, filters.weight(j, x, ci, k))
                })
            })
        })
    }

    fn matrix(&self, filters: &ConvFilters, j: usize, k: usize) -> SparseDiags {
        SparseDiags::from_entries(self.size, self.out_width, self.entries(filters, j, k))
    }

    /// Every diagonal any weight could populate.
    fn structural_diagonals(&self, filters: &ConvFilters) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for (r, c, _) in self.entries(filters, 0, 0) {
            out.insert((c + self.size - r) % self.size);
        }
        out
    }

    fn rotations(&self, filters: &ConvFilters, slots: usize) -> BTreeSet<usize> {
        let mut steps: BTreeSet<usize> = self.structural_diagonals(filters);
        steps.remove(&0);
        steps.insert(slots - self.size);
        steps.extend((1..filters.out_channels).map(|k| slots - self.out_width * k));
        steps
    }
}

/// Rotation keys [`conv2d`] needs for `filters` on input rows of `input`
/// geometry, plus the geometry of its output.
pub fn conv2d_rotations(
    filters: &ConvFilters,
    input: RowGeometry,
    slots: usize,
) -> Result<(BTreeSet<usize>, RowGeometry), HeError> {
    let plan = ConvPlan::new(filters, input, slots)?;
    Ok((plan.rotations(filters, slots), plan.output(filters)))
}

/// Valid convolution, one level consumed. Output channel `k` of each
/// output row lands in slots `k * out_width ..`.
pub fn conv2d<B: HeBackend>(
    backend: &B,
    filters: &ConvFilters,
    image: &EncImage<B::Ciphertext>,
) -> Result<EncImage<B::Ciphertext>, HeError> {
    let slots = backend.slot_count();
    let plan = ConvPlan::new(filters, image.geometry(), slots)?;
    let level = image.level();
    if level == 0 {
        return Err(HeError::budget("conv2d"));
    }
    if image.rows.len() != image.height {
        return Err(HeError::GeometryMismatch(format!("{} rows for height {}", image.rows.len(), image.height)));
    }
    if let Some(row) = image.rows.iter().find(|r| r.level() != level || r.layout().pending_scale != 1.0) {
        return Err(HeError::LayoutMismatch(format!(
            "convolution input rows must share one level and carry no pending scale (row at level {}, scale {})",
            row.level(),
            row.layout().pending_scale
        )));
    }

    // Widened Toeplitz diagonals per (filter row, output channel).
    let kh = filters.height;
    let cout = filters.out_channels;
    let mut mats: Vec<SparseDiags> = (0..kh * cout).map(|jk| plan.matrix(filters, jk / cout, jk % cout)).collect();
    for k in 0..cout {
        if (0..kh).all(|j| mats[j * cout + k].diags.is_empty()) {
            mats[k].diags.insert(0, vec![0.0; plan.out_width]);
        }
    }
    let mut columns = BTreeSet::new();
    let mut steps = BTreeSet::new();
    for m in &mats {
        columns.extend(m.columns());
        steps.extend(m.diags.keys().copied());
    }
    for row in &image.rows {
        check_doubling(row.layout(), &columns, plan.size, slots)?;
    }
    let plains: Vec<Vec<(usize, B::Plaintext)>> = mats
        .par_iter()
        .map(|m| m.diags.iter().map(|(&d, v)| Ok((d, backend.encode_raw(v, level)?))).collect())
        .collect::<Result<_, HeError>>()?;

    let s = filters.stride;
    let mut acc: Vec<Vec<Option<B::Product>>> =
        (0..plan.out_height).map(|_| (0..cout).map(|_| None).collect()).collect();
    let mut out_rows = Vec::with_capacity(plan.out_height);
    let out_geom = plan.output(filters);
    let out_layout = out_geom.row_layout(slots);
    let bias: Vec<f64> = (0..cout).flat_map(|k| std::iter::repeat(filters.bias[k]).take(plan.out_width)).collect();

    for r in 0..image.height {
        // Output rows i with i * s + j == r for some filter row j.
        let users: Vec<(usize, usize)> = (0..kh)
            .filter(|&j| r >= j && (r - j) % s == 0 && (r - j) / s < plan.out_height)
            .map(|j| ((r - j) / s, j))
            .collect();
        if users.is_empty() {
            continue;
        }
        let rot = rotations(backend, doubled(backend, image.rows[r].ciphertext(), plan.size)?, &steps)?;
        for &(i, j) in &users {
            acc[i].par_iter_mut().enumerate().try_for_each(|(k, a)| -> Result<(), HeError> {
                for (d, p) in &plains[j * cout + k] {
                    backend.mul_acc_raw(a, &rot[d], p)?;
                }
                Ok(())
            })?;
        }
        // Output rows whose last filter row was just consumed.
        while out_rows.len() < plan.out_height && out_rows.len() * s + kh - 1 == r {
            let i = out_rows.len();
            let channels: Vec<B::Ciphertext> = std::mem::take(&mut acc[i])
                .into_par_iter()
                .enumerate()
                .map(|(k, a)| {
                    let c = backend.finish_raw(a.expect("every channel has a diagonal"))?;
                    if k == 0 {
                        Ok(c)
                    } else {
                        backend.rotate_raw(&c, slots - plan.out_width * k)
                    }
                })
                .collect::<Result<_, HeError>>()?;
            let mut sum = channels[0].clone();
            for c in &channels[1..] {
                sum = backend.add_raw(&sum, c)?;
            }
            if bias.iter().any(|&b| b != 0.0) {
                sum = backend.add_plain_raw(&sum, &bias)?;
            }
            out_rows.push(HeVector::from_parts(sum, level - 1, out_layout.clone()));
        }
    }
    Ok(EncImage {
        rows: out_rows,
        height: out_geom.height,
        width: out_geom.width,
        channels: out_geom.channels,
        channel_stride: out_geom.channel_stride,
    })
}

/// Square every slot of every row, one level consumed.
pub fn square_activation<B: HeBackend>(
    backend: &B,
    image: &EncImage<B::Ciphertext>,
) -> Result<EncImage<B::Ciphertext>, HeError> {
    let rows = image.rows.par_iter().map(|r| backend.square(r)).collect::<Result<_, _>>()?;
    Ok(EncImage {
        rows,
        height: image.height,
        width: image.width,
        channels: image.channels,
        channel_stride: image.channel_stride,
    })
}

/// Layout after pooling rows with layout `row` of geometry `geom`:
/// channel sums sit at the channel base slots, everything else is garbage.
pub fn gap_layout(row: &SlotLayout, geom: RowGeometry) -> SlotLayout {
    let slots = row.valid.len();
    let mut support = row.support.clone();
    for i in 1..geom.width {
        support = support.union(&row.support.rotated_left(i));
    }
    SlotLayout {
        valid: SlotSet::from_indices(slots, (0..geom.channels).map(|c| c * geom.channel_stride)),
        support,
        pending_scale: row.pending_scale / (geom.height * geom.width) as f64,
    }
}

pub fn gap_rotations(geom: RowGeometry) -> BTreeSet<usize> {
    (1..geom.width).collect()
}

/// Spatial sums per channel with the averaging divisor deferred into the
/// layout; additions and rotations only.
pub fn global_avg_pool<B: HeBackend>(
    backend: &B,
    image: &EncImage<B::Ciphertext>,
) -> Result<HeVector<B::Ciphertext>, HeError> {
    let geom = image.geometry();
    let first = image.rows.first().ok_or_else(|| HeError::GeometryMismatch("pooling an empty image".into()))?;
    if geom.width > geom.channel_stride && geom.channels > 1 {
        return Err(HeError::GeometryMismatch("channel blocks overlap".into()));
    }
    let mut row_layout = first.layout().clone();
    let mut sum = first.ciphertext().clone();
    for row in &image.rows[1..] {
        row_layout = row_layout.sum(row.layout())?;
        sum = backend.add_raw(&sum, row.ciphertext())?;
    }
    let steps: Vec<usize> = gap_rotations(geom).into_iter().collect();
    let mut total = sum.clone();
    for r in backend.rotate_many_raw(&sum, &steps)? {
        total = backend.add_raw(&total, &r)?;
    }
    Ok(HeVector::from_parts(total, image.level(), gap_layout(&row_layout, geom)))
}

/// Padded matrix size for a dense layer over `layout`.
fn dense_size(rows: usize, cols: usize, layout: &SlotLayout) -> usize {
    let slots = layout.valid.len();
    rows.max(cols).max(layout.support.extent_below(slots / 2))
}

/// Rotation keys a dense layer of `rows x cols` over `layout` may need.
pub fn dense_rotations(rows: usize, cols: usize, layout: &SlotLayout) -> BTreeSet<usize> {
    let size = dense_size(rows, cols, layout);
    let slots = layout.valid.len();
    let entries = layout.valid.iter().filter(|&c| c < cols).flat_map(|c| (0..rows).map(move |r| (r, c, 1.0)));
    sparse_rotations(&SparseDiags::from_entries(size, rows, entries), slots)
}

/// `W x + bias` where column `c` of `w` multiplies slot `c` of `x`. The
/// pending scale and the garbage mask of `x` are folded into the cleartext
/// weights, so the output is clean at the cost of the one matvec level.
pub fn dense_with_fold<B: HeBackend>(
    backend: &B,
    w: &[Vec<f64>],
    bias: &[f64],
    x: &HeVector<B::Ciphertext>,
) -> Result<HeVector<B::Ciphertext>, HeError> {
    let (rows, cols) = shape(w);
    if bias.len() != rows || cols > backend.slot_count() {
        return Err(HeError::GeometryMismatch(format!("dense {rows}x{cols} with {} biases", bias.len())));
    }
    let layout = x.layout();
    let scale = layout.pending_scale;
    let size = dense_size(rows, cols, layout);
    let entries = (0..rows).flat_map(|r| {
        (0..cols).filter(|&c| layout.valid.contains(c)).map(move |c| (r, c, w[r][c] * scale))
    });
    let folded = SparseDiags::from_entries(size, rows, entries);
    let out = matvec_sparse(backend, &folded, x, 1.0)?;
    if bias.iter().all(|&b| b == 0.0) {
        return Ok(out);
    }
    let (ct, level, layout) = out.into_parts();
    Ok(HeVector::from_parts(backend.add_plain_raw(&ct, bias)?, level, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::sim::{SimBackend, SimDecryptor};

    #[test]
    fn identity_diagonal() {
        let id: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
        let d = diagonalize(&id);
        assert_eq!(d.rows[0], vec![1.0; 3]);
        assert!(d.rows[1..].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn toeplitz_small() {
        let t = toeplitz_from_filter(&[1.0, 2.0], 4, 1);
        assert_eq!(t, vec![vec![1.0, 2.0, 0.0, 0.0], vec![0.0, 1.0, 2.0, 0.0], vec![0.0, 0.0, 1.0, 2.0]]);
        let t = toeplitz_from_filter(&[1.0; 5], 112, 4);
        assert_eq!(t.len(), 27);
        assert_eq!(t[26].iter().position(|&v| v != 0.0), Some(104));
    }

    #[test]
    fn matvec_rejects_aliasing_input() {
        let be = SimBackend::new(16, 2).unwrap();
        let x = be.encrypt_vec(&[1.0; 12]).unwrap();
        let a = diagonalize(&[vec![1.0, 1.0, 1.0, 1.0]]);
        // Slot 4 is nonzero and would be read as a wrapped copy of slot 0.
        assert!(matches!(matvec(&be, &a, &x), Err(HeError::LayoutMismatch(_))));
    }

    #[test]
    fn matvec_at_level_zero() {
        let be = SimBackend::new(16, 1).unwrap();
        let x = be.encrypt_vec(&[1.0, 2.0]).unwrap();
        let a = diagonalize(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let y = matvec(&be, &a, &x).unwrap();
        assert_eq!(y.level(), 0);
        assert!(matches!(matvec(&be, &a, &y), Err(HeError::BudgetExhausted { .. })));
    }

    #[test]
    fn gap_of_ones() {
        let be = SimBackend::new(64, 2).unwrap();
        let img = Image::new(2, 2, 1, vec![1.0; 4]).unwrap();
        let enc = encrypt_image(&be, &img).unwrap();
        let g = global_avg_pool(&be, &enc).unwrap();
        let v = SimDecryptor.decrypt_vec(&be, &g).unwrap();
        assert_eq!(v[0], 4.0);
        assert_eq!(g.layout().pending_scale, 0.25);
        assert!(g.layout().pending_mask());
        assert_eq!(g.level(), 2);
    }
}
