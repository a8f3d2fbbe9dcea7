//! Network descriptions, plaintext reference inference, encrypted
//! inference over the tensor kernels, weight files and image loading.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enc_tensor::{self, ConvFilters, EncImage, Image, RowGeometry};
use crate::he::{HeBackend, HeError, HeVector, SlotLayout, SlotSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: HeError,
    },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    /// The underlying kernel error, if any.
    pub fn he_error(&self) -> Option<&HeError> {
        match self {
            ModelError::Layer { source, .. } | ModelError::He(source) => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d(ConvFilters),
    Square,
    GlobalAvgPool,
    /// `weights[o][i]` maps input feature `i` to output `o`.
    Dense { weights: Vec<Vec<f64>>, bias: Vec<f64> },
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Square => "square",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Dense { .. } => "dense",
        }
    }

    /// Multiplicative levels consumed.
    pub fn depth(&self) -> usize {
        match self {
            Layer::GlobalAvgPool => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `(height, width, channels)`
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

/// Shape of the activation between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Image(usize, usize, usize),
    Vector(usize),
}

impl ModelSpec {
    /// Check that geometry chains through every layer and that the last
    /// layer is dense; returns the logit count.
    pub fn validate(&self) -> Result<usize, ModelError> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(ModelError::Invalid("empty input shape".into()));
        }
        let mut shape = Shape::Image(h, w, c);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = Self::step(shape, layer).map_err(|e| ModelError::Invalid(format!("layer {i} ({}): {e}", layer.name())))?;
        }
        match (self.layers.last(), shape) {
            (Some(Layer::Dense { .. }), Shape::Vector(n)) => Ok(n),
            _ => Err(ModelError::Invalid("the final layer must be dense".into())),
        }
    }

    fn step(shape: Shape, layer: &Layer) -> Result<Shape, String> {
        match (layer, shape) {
            (Layer::Conv2d(f), Shape::Image(h, w, c)) => {
                f.validate().map_err(|e| e.to_string())?;
                if f.in_channels != c {
                    return Err(format!("expects {} input channels, got {c}", f.in_channels));
                }
                let (oh, ow) = f.output_size(h, w).map_err(|e| e.to_string())?;
                Ok(Shape::Image(oh, ow, f.out_channels))
            }
            (Layer::Conv2d(_), Shape::Vector(_)) => Err("convolution after the spatial dimensions were pooled".into()),
            (Layer::Square, s) => Ok(s),
            (Layer::GlobalAvgPool, Shape::Image(_, _, c)) => Ok(Shape::Vector(c)),
            (Layer::GlobalAvgPool, Shape::Vector(_)) => Err("pooling a vector".into()),
            (Layer::Dense { weights, bias }, s) => {
                let features = match s {
                    Shape::Vector(n) => n,
                    Shape::Image(1, 1, c) => c,
                    Shape::Image(..) => return Err("dense layer on an unpooled image".into()),
                };
                if weights.is_empty() || bias.len() != weights.len() || weights.iter().any(|r| r.len() != features) {
                    return Err(format!("weights must be {} x {features} with matching bias", bias.len()));
                }
                Ok(Shape::Vector(weights.len()))
            }
        }
    }

    /// Levels an encrypted evaluation consumes.
    pub fn depth_required(&self) -> usize {
        self.layers.iter().map(Layer::depth).sum()
    }

    pub fn conv_layers(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv2d(_))).count()
    }

    /// Floating-point forward pass; the reference every encrypted result is
    /// judged against.
    pub fn infer_plain(&self, image: &Image) -> Result<Vec<f64>, ModelError> {
        self.validate()?;
        if (image.height, image.width, image.channels) != self.input_shape {
            return Err(ModelError::Image(format!(
                "expected {:?}, got {}x{}x{}",
                self.input_shape, image.height, image.width, image.channels
            )));
        }
        enum Act {
            Image(Image),
            Vector(Vec<f64>),
        }
        let mut act = Act::Image(image.clone());
        for layer in &self.layers {
            act = match (layer, act) {
                (Layer::Conv2d(f), Act::Image(img)) => Act::Image(conv_plain(f, &img)),
                (Layer::Square, Act::Image(mut img)) => {
                    img.data.iter_mut().for_each(|v| *v *= *v);
                    Act::Image(img)
                }
                (Layer::Square, Act::Vector(v)) => Act::Vector(v.iter().map(|x| x * x).collect()),
                (Layer::GlobalAvgPool, Act::Image(img)) => {
                    let area = (img.height * img.width) as f64;
                    let mut sums = vec![0.0; img.channels];
                    for (i, v) in img.data.iter().enumerate() {
                        sums[i % img.channels] += v;
                    }
                    Act::Vector(sums.into_iter().map(|s| s / area).collect())
                }
                (Layer::Dense { weights, bias }, act) => {
                    let x = match act {
                        Act::Vector(v) => v,
                        Act::Image(img) => img.data,
                    };
                    Act::Vector(
                        weights
                            .iter()
                            .zip(bias)
                            .map(|(row, b)| row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + b)
                            .collect(),
                    )
                }
                _ => unreachable!("validated geometry"),
            };
        }
        match act {
            Act::Vector(v) => Ok(v),
            Act::Image(_) => unreachable!("validated final dense layer"),
        }
    }

    /// Rotation steps the encrypted evaluation issues on `slots` slots.
    pub fn rotation_steps(&self, slots: usize) -> Result<BTreeSet<usize>, ModelError> {
        self.validate()?;
        let (h, w, c) = self.input_shape;
        let mut geom = RowGeometry::packed(h, w, c);
        let mut vector: Option<(SlotLayout, Vec<usize>)> = None;
        let mut steps = BTreeSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |source| ModelError::Layer { layer: i, source };
            match layer {
                Layer::Conv2d(f) => {
                    let (s, out) = enc_tensor::conv2d_rotations(f, geom, slots).map_err(at)?;
                    steps.extend(s);
                    geom = out;
                }
                Layer::Square => {}
                Layer::GlobalAvgPool => {
                    steps.extend(enc_tensor::gap_rotations(geom));
                    vector = Some((
                        enc_tensor::gap_layout(&geom.row_layout(slots), geom),
                        (0..geom.channels).map(|k| k * geom.channel_stride).collect(),
                    ));
                }
                Layer::Dense { weights, .. } => {
                    let (layout, features) =
                        vector.take().unwrap_or_else(|| (geom.row_layout(slots), image_features(geom)));
                    let cols = features.iter().max().map_or(0, |m| m + 1);
                    steps.extend(enc_tensor::dense_rotations(weights.len(), cols, &layout));
                    vector = Some((SlotLayout::dense(slots, weights.len()), (0..weights.len()).collect()));
                }
            }
        }
        Ok(steps)
    }

    /// Encrypt `image` row by row after checking it against the input shape.
    pub fn encode_image_rows<B: HeBackend>(
        &self,
        image: &Image,
        backend: &B,
    ) -> Result<EncImage<B::Ciphertext>, ModelError> {
        if (image.height, image.width, image.channels) != self.input_shape {
            return Err(ModelError::Image(format!(
                "expected {:?}, got {}x{}x{}",
                self.input_shape, image.height, image.width, image.channels
            )));
        }
        Ok(enc_tensor::encrypt_image(backend, image)?)
    }

    /// Chain the encrypted kernels. Needs only evaluation keys; errors
    /// carry the index of the failing layer.
    pub fn infer_encrypted<B: HeBackend>(
        &self,
        image: &EncImage<B::Ciphertext>,
        backend: &B,
    ) -> Result<HeVector<B::Ciphertext>, ModelError> {
        self.infer_encrypted_with(image, backend, |_, _| {})
    }

    /// As [`Self::infer_encrypted`], calling `on_layer(index, seconds)`
    /// after each layer.
    pub fn infer_encrypted_with<B: HeBackend>(
        &self,
        image: &EncImage<B::Ciphertext>,
        backend: &B,
        mut on_layer: impl FnMut(usize, f64),
    ) -> Result<HeVector<B::Ciphertext>, ModelError> {
        self.validate()?;
        if (image.height, image.width, image.channels) != self.input_shape {
            return Err(ModelError::Image("encrypted image does not match the input shape".into()));
        }
        enum Act<C> {
            Image(EncImage<C>),
            Vector(HeVector<C>, Vec<usize>),
        }
        let mut act = Act::Image(image.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |source| ModelError::Layer { layer: i, source };
            let start = std::time::Instant::now();
            act = match (layer, act) {
                (Layer::Conv2d(f), Act::Image(img)) => Act::Image(enc_tensor::conv2d(backend, f, &img).map_err(at)?),
                (Layer::Square, Act::Image(img)) => {
                    Act::Image(enc_tensor::square_activation(backend, &img).map_err(at)?)
                }
                (Layer::Square, Act::Vector(v, f)) => Act::Vector(backend.square(&v).map_err(at)?, f),
                (Layer::GlobalAvgPool, Act::Image(img)) => {
                    let features = (0..img.channels).map(|k| k * img.channel_stride).collect();
                    Act::Vector(enc_tensor::global_avg_pool(backend, &img).map_err(at)?, features)
                }
                (Layer::Dense { weights, bias }, act) => {
                    let (x, features) = match act {
                        Act::Vector(v, f) => (v, f),
                        Act::Image(mut img) => {
                            let f = image_features(img.geometry());
                            (img.rows.pop().expect("one row"), f)
                        }
                    };
                    let w = slot_weights(weights, &features);
                    let y = enc_tensor::dense_with_fold(backend, &w, bias, &x).map_err(at)?;
                    Act::Vector(y, (0..weights.len()).collect())
                }
                _ => unreachable!("validated geometry"),
            };
            on_layer(i, start.elapsed().as_secs_f64());
        }
        match act {
            Act::Vector(v, _) => Ok(v),
            Act::Image(_) => unreachable!("validated final dense layer"),
        }
    }
}

/// Slots holding the features of a 1x1 image row.
fn image_features(geom: RowGeometry) -> Vec<usize> {
    (0..geom.channels).map(|k| k * geom.channel_stride).collect()
}

/// Spread feature-space weights over the slots holding each feature.
fn slot_weights(weights: &[Vec<f64>], features: &[usize]) -> Vec<Vec<f64>> {
    let cols = features.iter().max().map_or(0, |m| m + 1);
    weights
        .iter()
        .map(|row| {
            let mut out = vec![0.0; cols];
            for (&slot, &v) in features.iter().zip(row) {
                out[slot] = v;
            }
            out
        })
        .collect()
}

fn conv_plain(f: &ConvFilters, img: &Image) -> Image {
    let (oh, ow) = f.output_size(img.height, img.width).expect("validated geometry");
    let mut out = Image::zeros(oh, ow, f.out_channels);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = f.bias.clone();
            for j in 0..f.height {
                for dx in 0..f.width {
                    for ci in 0..f.in_channels {
                        let v = img.get(y * f.stride + j, x * f.stride + dx, ci);
                        for (k, a) in acc.iter_mut().enumerate() {
                            *a += f.weight(j, dx, ci, k) * v;
                        }
                    }
                }
            }
            for (k, a) in acc.into_iter().enumerate() {
                out.set(y, x, k, a);
            }
        }
    }
    out
}

/// Index of the largest logit.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

// ---- random-weight catalog ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

/// Layer shapes without weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: (usize, usize, usize),
    pub convs: Vec<ConvShape>,
    pub classes: usize,
}

impl Architecture {
    /// `convs` 5x5 convolution/square blocks, pooling and one dense head.
    /// Strides are 4 for 112-pixel inputs and 2 for smaller ones, the
    /// largest stride that keeps every block's output nonempty.
    pub fn standard(convs: usize, size: usize) -> Self {
        let stride = if size >= 112 { 4 } else { 2 };
        Self {
            input_shape: (size, size, 1),
            convs: (0..convs).map(|_| ConvShape { kernel: 5, stride, out_channels: 4 }).collect(),
            classes: 10,
        }
    }

    /// Seeded random weights. Values are f32-representable so weight
    /// files roundtrip exactly; gains keep activations near unit scale.
    pub fn random_spec(&self, seed: u64) -> ModelSpec {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut uniform = |gain: f64| (rng.gen_range(-1.0f32..1.0) as f64 * gain) as f32 as f64;
        let mut layers = Vec::new();
        let mut cin = self.input_shape.2;
        for c in &self.convs {
            let mut f = ConvFilters::zeros(c.kernel, c.kernel, cin, c.out_channels, c.stride);
            let gain = 2.0 / ((c.kernel * c.kernel * cin) as f64).sqrt();
            f.weights.iter_mut().for_each(|w| *w = uniform(gain));
            f.bias.iter_mut().for_each(|b| *b = uniform(0.1));
            layers.push(Layer::Conv2d(f));
            layers.push(Layer::Square);
            cin = c.out_channels;
        }
        layers.push(Layer::GlobalAvgPool);
        let gain = 2.0 / (cin as f64).sqrt();
        let weights = (0..self.classes).map(|_| (0..cin).map(|_| uniform(gain)).collect()).collect();
        let bias = (0..self.classes).map(|_| uniform(0.1)).collect();
        layers.push(Layer::Dense { weights, bias });
        ModelSpec { input_shape: self.input_shape, layers }
    }
}

/// Seeded image with pixels uniform in `[0, 1)`.
pub fn random_image(shape: (usize, usize, usize), seed: u64) -> Image {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (h, w, c) = shape;
    let data = (0..h * w * c).map(|_| rng.gen::<f64>()).collect();
    Image { height: h, width: w, channels: c, data }
}

// ---- weight files ----

const WEIGHTS_MAGIC: &[u8; 4] = b"HEW1";
const WEIGHTS_VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_SQUARE: u8 = 1;
const KIND_GAP: u8 = 2;
const KIND_DENSE: u8 = 3;

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        put_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    /// A named tensor whose shape must equal `expect`.
    fn tensor(&mut self, name: &str, expect: &[usize]) -> Result<Vec<f64>, ModelError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let got_name = String::from_utf8_lossy(self.take(len)?).into_owned();
        if got_name != name {
            return Err(ModelError::Format(format!("expected tensor {name}, found {got_name}")));
        }
        let ndim = self.u8()? as usize;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        if shape != expect {
            return Err(ModelError::Format(format!("tensor {name} has shape {shape:?}, expected {expect:?}")));
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count.checked_mul(4).ok_or_else(|| ModelError::Format("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

impl ModelSpec {
    /// Serialize as a weights file. Values are stored as f32.
    pub fn to_weights_bytes(&self) -> Vec<u8> {
        let mut out = WEIGHTS_MAGIC.to_vec();
        put_u32(&mut out, WEIGHTS_VERSION as usize);
        let (h, w, c) = self.input_shape;
        for d in [h, w, c, self.layers.len()] {
            put_u32(&mut out, d);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(f) => {
                    out.push(KIND_CONV);
                    for d in [f.height, f.width, f.in_channels, f.out_channels, f.stride] {
                        put_u32(&mut out, d);
                    }
                    let shape = [f.height, f.width, f.in_channels, f.out_channels];
                    put_tensor(&mut out, &format!("layer{i}.weight"), &shape, f.weights.iter().copied());
                    put_tensor(&mut out, &format!("layer{i}.bias"), &[f.out_channels], f.bias.iter().copied());
                }
                Layer::Square => out.push(KIND_SQUARE),
                Layer::GlobalAvgPool => out.push(KIND_GAP),
                Layer::Dense { weights, bias } => {
                    out.push(KIND_DENSE);
                    let (rows, cols) = (weights.len(), weights.first().map_or(0, Vec::len));
                    put_u32(&mut out, rows);
                    put_u32(&mut out, cols);
                    put_tensor(&mut out, &format!("layer{i}.weight"), &[rows, cols], weights.iter().flatten().copied());
                    put_tensor(&mut out, &format!("layer{i}.bias"), &[rows], bias.iter().copied());
                }
            }
        }
        out
    }

    pub fn from_weights_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 8 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(ModelError::Format("missing HEW1 magic".into()));
        }
        let mut r = Cursor { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != WEIGHTS_VERSION as usize {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let input_shape = (r.u32()?, r.u32()?, r.u32()?);
        let count = r.u32()?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let layer = match r.u8()? {
                KIND_CONV => {
                    let (kh, kw, cin, cout, stride) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                    let weights = r.tensor(&format!("layer{i}.weight"), &[kh, kw, cin, cout])?;
                    let bias = r.tensor(&format!("layer{i}.bias"), &[cout])?;
                    Layer::Conv2d(ConvFilters {
                        height: kh,
                        width: kw,
                        in_channels: cin,
                        out_channels: cout,
                        weights,
                        stride,
                        bias,
                    })
                }
                KIND_SQUARE => Layer::Square,
                KIND_GAP => Layer::GlobalAvgPool,
                KIND_DENSE => {
                    let (rows, cols) = (r.u32()?, r.u32()?);
                    let flat = r.tensor(&format!("layer{i}.weight"), &[rows, cols])?;
                    let bias = r.tensor(&format!("layer{i}.bias"), &[rows])?;
                    let weights = flat.chunks(cols.max(1)).map(<[f64]>::to_vec).collect();
                    Layer::Dense { weights, bias }
                }
                k => return Err(ModelError::Format(format!("unknown layer kind {k}"))),
            };
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        let spec = ModelSpec { input_shape, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::File::create(path)?.write_all(&self.to_weights_bytes())?;
        Ok(())
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelSpec, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    ModelSpec::from_weights_bytes(&bytes)
}

// ---- images ----

/// Load a grayscale image from CSV (one image row per line) or binary
/// PGM (`P5`, 8-bit), normalized to `[0, 1]` for PGM.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ModelError> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.starts_with(b"P5") {
        parse_pgm(&bytes)
    } else {
        parse_csv(std::str::from_utf8(&bytes).map_err(|_| ModelError::Image("neither PGM nor UTF-8 CSV".into()))?)
    }
}

pub fn parse_csv(text: &str) -> Result<Image, ModelError> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| ModelError::Image(format!("{v:?}: {e}"))))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(ModelError::Image("CSV rows must be nonempty and equally long".into()));
    }
    Ok(Image::new(rows.len(), width, 1, rows.concat())?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Image, ModelError> {
    let bad = |m: &str| ModelError::Image(format!("PGM: {m}"));
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos]).ok().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated raster"))?;
    Ok(Image::new(height, width, 1, raster.iter().map(|&b| b as f64 / maxval as f64).collect())?)
}

/// Encode `image` as an 8-bit PGM, clamping to `[0, 1]`.
pub fn to_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().step_by(image.channels).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Decrypted logits of an encrypted inference result.
pub fn read_logits(values: &[f64], classes: usize) -> Vec<f64> {
    values[..classes].to_vec()
}

/// Layout check helper for callers that reassemble results from bytes.
pub fn logits_layout(slots: usize, classes: usize) -> SlotLayout {
    let valid = SlotSet::range(slots, 0, classes);
    SlotLayout { support: valid.clone(), valid, pending_scale: 1.0 }
}
