//! Canonical-embedding encoder: real slot vectors to integer polynomial
//! coefficients and back, via the special FFT over the orbit of 5 in
//! `Z_{2N}^*`. Slot `j` is the evaluation at `zeta^(5^j)`, so the
//! automorphism `X -> X^(5^k)` rotates slots left by `k`.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::he::HeError;

/// Coefficients beyond this magnitude cannot be represented.
const COEFF_LIMIT: f64 = (1u64 << 62) as f64;

#[derive(Debug, Clone)]
pub struct Encoder {
    ring_degree: usize,
    slots: usize,
    rot_group: Vec<usize>,
    ksi_pows: Vec<Complex64>,
}

impl Encoder {
    pub fn new(ring_degree: usize) -> Self {
        let m = 2 * ring_degree;
        let slots = ring_degree / 2;
        let mut rot_group = Vec::with_capacity(slots);
        let mut g = 1usize;
        for _ in 0..slots {
            rot_group.push(g);
            g = g * 5 % m;
        }
        let ksi_pows = (0..=m)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / m as f64;
                Complex64::new(angle.cos(), angle.sin())
            })
            .collect();
        Self { ring_degree, slots, rot_group, ksi_pows }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Galois element realizing a left rotation by `steps` slots.
    pub fn galois_element(&self, steps: usize) -> usize {
        self.rot_group[steps % self.slots]
    }

    fn bit_reverse(vals: &mut [Complex64]) {
        let n = vals.len();
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                vals.swap(i, j);
            }
        }
    }

    fn fft_special(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.ring_degree;
        Self::bit_reverse(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = m / lenq;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * gap;
                    let u = vals[i + j];
                    let v = vals[i + j + lenh] * self.ksi_pows[idx];
                    vals[i + j] = u + v;
                    vals[i + j + lenh] = u - v;
                }
            }
            len <<= 1;
        }
    }

    fn fft_special_inv(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.ring_degree;
        let mut len = size;
        while len >= 2 {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = m / lenq;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - self.rot_group[j] % lenq) * gap;
                    let u = vals[i + j] + vals[i + j + lenh];
                    let v = (vals[i + j] - vals[i + j + lenh]) * self.ksi_pows[idx];
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
            }
            len >>= 1;
        }
        Self::bit_reverse(vals);
        let inv = 1.0 / size as f64;
        for v in vals.iter_mut() {
            *v *= inv;
        }
    }

    /// Scaled, rounded coefficients of the polynomial whose slots are `values`.
    pub fn encode(&self, values: &[f64], scale: f64) -> Result<Vec<i64>, HeError> {
        if values.len() > self.slots {
            return Err(HeError::TooManyValues { got: values.len(), slots: self.slots });
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(HeError::ScaleOverflow(bad));
        }
        let mut u = vec![Complex64::new(0.0, 0.0); self.slots];
        for (slot, &v) in u.iter_mut().zip(values) {
            slot.re = v;
        }
        self.fft_special_inv(&mut u);
        let half = self.ring_degree / 2;
        let mut coeffs = vec![0i64; self.ring_degree];
        for (i, z) in u.iter().enumerate() {
            for (pos, part) in [(i, z.re), (i + half, z.im)] {
                let c = (part * scale).round();
                if c.abs() >= COEFF_LIMIT {
                    let worst = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    return Err(HeError::ScaleOverflow(worst));
                }
                coeffs[pos] = c as i64;
            }
        }
        Ok(coeffs)
    }

    /// Real parts of the slots of a polynomial with (centered) coefficients.
    pub fn decode(&self, coeffs: &[f64], scale: f64) -> Vec<f64> {
        let half = self.ring_degree / 2;
        let mut u: Vec<Complex64> =
            (0..self.slots).map(|i| Complex64::new(coeffs[i] / scale, coeffs[i + half] / scale)).collect();
        self.fft_special(&mut u);
        u.into_iter().map(|z| z.re).collect()
    }
}
