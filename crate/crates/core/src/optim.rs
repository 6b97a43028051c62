//! Adaptive-moment (Adam) updates over flat parameter arrays.

use crate::gaussian::{Attribute, GaussianCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moments for one flat parameter array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update at (1-based) step `t`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, hp: &AdamParams, t: u64) {
        self.update_with(params, grads, |_| lr, hp, t);
    }

    /// Like [`Self::update`] with a separate step size per scalar.
    pub fn update_per_param(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64], hp: &AdamParams, t: u64) {
        assert_eq!(lrs.len(), params.len());
        self.update_with(params, grads, |i| lrs[i], hp, t);
    }

    fn update_with(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: impl Fn(usize) -> f64,
        hp: &AdamParams,
        t: u64,
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let bc1 = 1.0 - hp.beta1.powi(t as i32);
        let bc2 = 1.0 - hp.beta2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}

/// Optimizer state shaped like a [`GaussianCloud`]: one moment pair per
/// attribute array, rows kept in lockstep with the cloud through densification.
#[derive(Debug, Clone)]
pub struct CloudAdam {
    pub hp: AdamParams,
    moments: [Moments; 5],
    step: u64,
}

impl CloudAdam {
    pub fn new(n: usize, hp: AdamParams) -> Self {
        Self {
            hp,
            moments: Attribute::ALL.map(|a| Moments::zeros(n * a.width())),
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.moments[0].len() / Attribute::ALL[0].width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, attr: Attribute) -> &Moments {
        &self.moments[attr as usize]
    }

    /// Applies one update; `lrs` is indexed by [`Attribute`].
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &GaussianCloud, lrs: &[f64; 5]) {
        assert_eq!(cloud.len(), self.len(), "optimizer rows out of sync with cloud");
        self.step += 1;
        for attr in Attribute::ALL {
            self.moments[attr as usize].update(
                cloud.flat_mut(attr),
                grads.flat(attr),
                lrs[attr as usize],
                &self.hp,
                self.step,
            );
        }
    }

    /// Appends `count` rows of zero moments.
    pub fn extend(&mut self, count: usize) {
        for attr in Attribute::ALL {
            let mo = &mut self.moments[attr as usize];
            let add = count * attr.width();
            mo.m.extend(std::iter::repeat_n(0.0, add));
            mo.v.extend(std::iter::repeat_n(0.0, add));
        }
    }

    /// Keeps rows whose mask entry is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        for attr in Attribute::ALL {
            let w = attr.width();
            let mo = &mut self.moments[attr as usize];
            for buf in [&mut mo.m, &mut mo.v] {
                let kept: Vec<f64> = buf
                    .chunks_exact(w)
                    .zip(keep)
                    .filter(|(_, k)| **k)
                    .flat_map(|(row, _)| row.iter().copied())
                    .collect();
                *buf = kept;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut mo = Moments::zeros(3);
        let mut p = vec![1.0, 1.0, 1.0];
        mo.update(&mut p, &[2.0, -0.5, 0.0], 0.1, &AdamParams::default(), 1);
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] - 1.1).abs() < 1e-12);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut mo = Moments::zeros(2);
        let mut p = vec![3.0, -2.0];
        for t in 1..=2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            mo.update(&mut p, &g, 0.01, &AdamParams::default(), t);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
        assert!((p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn rows_track_the_cloud() {
        let mut adam = CloudAdam::new(4, AdamParams::default());
        let mut cloud = GaussianCloud::zeros(4);
        let mut grads = GaussianCloud::zeros(4);
        grads.flat_mut(Attribute::Sh).iter_mut().for_each(|g| *g = 1.0);
        adam.step(&mut cloud, &grads, &[0.1; 5]);
        adam.extend(2);
        assert_eq!(adam.len(), 6);
        assert_eq!(adam.moments(Attribute::Sh).m[4 * 12..], [0.0; 24]);
        adam.retain_mask(&[true, false, true, true, false, true]);
        assert_eq!(adam.len(), 4);
        assert_eq!(adam.moments(Attribute::Rotation).m.len(), 16);
        assert!(adam.moments(Attribute::Sh).m[..36].iter().all(|&m| m > 0.0));
        assert_eq!(adam.moments(Attribute::Sh).m[36..], [0.0; 12]);
    }
}
