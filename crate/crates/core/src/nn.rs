//! Parameterized building blocks recorded onto a [`Graph`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), &[fan_in, fan_out], Init::FanIn(fan_in), rng);
        let b = bias.then(|| store.add(format!("{name}.b"), &[fan_out], Init::Zeros, rng));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `kernel`, "same" padding for odd kernels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = store.add(format!("{name}.w"), &[c_out, c_in, kernel, kernel], Init::FanIn(fan_in), rng);
        let b = bias.then(|| store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng));
        Self { w, b, stride, pad: kernel / 2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        let gain = store.add(format!("{name}.gain"), &[dim], Init::Ones, rng);
        let bias = store.add(format!("{name}.bias"), &[dim], Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, Some(gain), Some(bias))
    }
}

/// Fully connected stack with ReLU between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Gated recurrent unit cell with the usual reset/update/candidate gates.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub size: usize,
}

impl GruCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.ih"), input, 3 * hidden, true, rng),
            hidden: Linear::new(store, &format!("{name}.hh"), hidden, 3 * hidden, true, rng),
            size: hidden,
        }
    }

    /// `x: [R, input]`, `h: [R, hidden]` → new hidden state `[R, hidden]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: Var) -> Var {
        let n = self.size;
        let gi = self.input.forward(g, x);
        let gh = self.hidden.forward(g, h);
        let axis = g.shape(gi).len() - 1;
        let (ir, iz, inn) = (g.slice(gi, axis, 0, n), g.slice(gi, axis, n, n), g.slice(gi, axis, 2 * n, n));
        let (hr, hz, hn) = (g.slice(gh, axis, 0, n), g.slice(gh, axis, n, n), g.slice(gh, axis, 2 * n, n));
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let z = g.add(iz, hz);
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn);
        let cand = g.add(inn, rh);
        let cand = g.tanh(cand);
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        let diff = g.sub(h, cand);
        let zd = g.mul(z, diff);
        g.add(cand, zd)
    }
}

/// Fixed `[y, x, 1 - y, 1 - x]` coordinate grid, `[h * w, 4]`, row-major.
pub fn coordinate_grid<T: Real>(h: usize, w: usize) -> Vec<T> {
    let lin = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (lin(i, h), lin(j, w));
            out.extend_from_slice(&[T::c(y), T::c(x), T::c(1.0 - y), T::c(1.0 - x)]);
        }
    }
    out
}

/// Learned projection of the coordinate grid, added to channel-first maps.
#[derive(Debug, Clone)]
pub struct PositionEmbed {
    pub proj: Linear,
    pub channels: usize,
}

impl PositionEmbed {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        Self { proj: Linear::new(store, name, 4, channels, true, rng), channels }
    }

    /// Embedding for an `h × w` grid as `[channels, h, w]`.
    pub fn embedding<T: Real>(&self, g: &mut Graph<'_, T>, h: usize, w: usize) -> Var {
        let grid = g.input(&[h * w, 4], coordinate_grid(h, w));
        let e = self.proj.forward(g, grid);
        let e = g.transpose_last2(e);
        g.reshape(e, &[self.channels, h, w])
    }

    /// `x: [B, C, h, w]` plus the embedding broadcast over the batch.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let e = self.embedding(g, s[2], s[3]);
        g.add_suffix(x, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut s, "gru", 2, 1, &mut rng);
        let mut g = Graph::new(&s);
        let x = g.input(&[1, 2], alloc::vec![0.3, -0.7]);
        let h = g.input(&[1, 1], alloc::vec![0.4]);
        let out = cell.forward(&mut g, x, h);
        let wi = &s.get(cell.input.w).data; // [2, 3]
        let wh = &s.get(cell.hidden.w).data; // [1, 3]
        let gate = |k: usize| 0.3 * wi[k] - 0.7 * wi[3 + k];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sig(gate(0) + 0.4 * wh[0]);
        let z = sig(gate(1) + 0.4 * wh[1]);
        let n = (gate(2) + r * (0.4 * wh[2])).tanh();
        let expect = (1.0 - z) * n + z * 0.4;
        assert!((g.value(out)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn coordinate_grid_corners() {
        let grid: Vec<f64> = coordinate_grid(3, 2);
        assert_eq!(&grid[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&grid[grid.len() - 4..], &[1.0, 1.0, 0.0, 0.0]);
    }
}
