//! Independent plaintext oracles and random-instance generators shared by
//! the integration tests. Values are multiples of 2^-8 so that the
//! simulator and the oracles agree exactly regardless of summation order.
#![allow(dead_code)]

use hegemony::enc_tensor::{ConvFilters, Image};
use rand::Rng;

pub fn dyadic<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(-256i32..=256) as f64 / 256.0
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| dyadic(rng)).collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| random_vec(rng, cols)).collect()
}

pub fn random_image<R: Rng>(rng: &mut R, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, random_vec(rng, h * w * c)).unwrap()
}

pub fn random_filters<R: Rng>(rng: &mut R, kh: usize, kw: usize, cin: usize, cout: usize, stride: usize) -> ConvFilters {
    let mut f = ConvFilters::zeros(kh, kw, cin, cout, stride);
    f.weights = random_vec(rng, f.weights.len());
    f.bias = random_vec(rng, cout);
    f
}

pub fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum()).collect()
}

/// Direct sliding-window convolution, valid padding.
pub fn conv(img: &Image, f: &ConvFilters) -> Image {
    let oh = (img.height - f.height) / f.stride + 1;
    let ow = (img.width - f.width) / f.stride + 1;
    let mut out = Image::zeros(oh, ow, f.out_channels);
    for i in 0..oh {
        for x in 0..ow {
            for k in 0..f.out_channels {
                let mut s = f.bias[k];
                for dy in 0..f.height {
                    for dx in 0..f.width {
                        for ci in 0..f.in_channels {
                            let w = f.weights[((dy * f.width + dx) * f.in_channels + ci) * f.out_channels + k];
                            s += w * img.get(i * f.stride + dy, x * f.stride + dx, ci);
                        }
                    }
                }
                out.set(i, x, k, s);
            }
        }
    }
    out
}

pub fn square(img: &Image) -> Image {
    Image::new(img.height, img.width, img.channels, img.data.iter().map(|v| v * v).collect()).unwrap()
}

pub fn channel_sums(img: &Image) -> Vec<f64> {
    (0..img.channels)
        .map(|c| {
            let mut s = 0.0;
            for y in 0..img.height {
                for x in 0..img.width {
                    s += img.get(y, x, c);
                }
            }
            s
        })
        .collect()
}

pub fn channel_means(img: &Image) -> Vec<f64> {
    let n = (img.height * img.width) as f64;
    channel_sums(img).into_iter().map(|s| s / n).collect()
}

pub fn dense(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    matvec(w, x).into_iter().zip(b).map(|(y, b)| y + b).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Slot-indexed dense weights for features at channel bases.
pub fn slot_weights(w: &[Vec<f64>], stride: usize) -> Vec<Vec<f64>> {
    let cols = (w[0].len() - 1) * stride + 1;
    w.iter()
        .map(|row| {
            let mut out = vec![0.0; cols];
            for (c, &v) in row.iter().enumerate() {
                out[c * stride] = v;
            }
            out
        })
        .collect()
}
