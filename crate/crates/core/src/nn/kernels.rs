//! Dense layers and activations with hand-written backward passes.
//!
//! Every backward function *accumulates* parameter gradients into a
//! same-shaped gradient container and returns the gradient with respect to
//! its inputs. Caches hold exactly what the backward pass needs.

use serde::{Deserialize, Serialize};

use super::tensor::{add_assign, Matrix};
use super::{ParamSet, ShapeError};

/// `y = W x + b`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Matrix::zeros(output, input),
            b: vec![0.0; output],
        }
    }

    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self, ShapeError> {
        if w.rows() != b.len() {
            return Err(ShapeError::new(
                "affine bias",
                format!("{}x{}", w.rows(), w.cols()),
                format!("bias[{}]", b.len()),
            ));
        }
        Ok(Self { w, b })
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ShapeError> {
        let mut y = self.w.matvec(x)?;
        add_assign(&mut y, &self.b);
        Ok(y)
    }

    /// Accumulates `dW += g xᵀ`, `db += g` and returns `Wᵀ g`.
    pub fn backward(&self, x: &[f64], grad_y: &[f64], grads: &mut Affine) -> Vec<f64> {
        grads.w.add_outer(grad_y, x);
        add_assign(&mut grads.b, grad_y);
        self.w.matvec_t(grad_y)
    }
}

impl ParamSet for Affine {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.w"), self.w.as_slice()));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.w"), self.w.as_mut_slice()));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub l1: Affine,
    pub l2: Affine,
}

#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub y: Vec<f64>,
}

impl Mlp2 {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            l1: Affine::zeros(input, hidden),
            l2: Affine::zeros(hidden, output),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Mlp2Cache, ShapeError> {
        let pre = self.l1.forward(x)?;
        let hidden = relu(&pre);
        let y = self.l2.forward(&hidden)?;
        Ok(Mlp2Cache {
            x: x.to_vec(),
            pre,
            hidden,
            y,
        })
    }

    pub fn backward(&self, cache: &Mlp2Cache, grad_y: &[f64], grads: &mut Mlp2) -> Vec<f64> {
        let grad_hidden = self.l2.backward(&cache.hidden, grad_y, &mut grads.l2);
        let grad_pre = relu_backward(&cache.pre, &grad_hidden);
        self.l1.backward(&cache.x, &grad_pre, &mut grads.l1)
    }
}

impl ParamSet for Mlp2 {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.l1.collect(&format!("{prefix}.l1"), out);
        self.l2.collect(&format!("{prefix}.l2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.l1.collect_mut(&format!("{prefix}.l1"), out);
        self.l2.collect_mut(&format!("{prefix}.l2"), out);
    }
}

/// Single GRU cell.
///
/// Gate convention: the update gate `z` keeps the previous state,
/// `h' = (1 - z) ⊙ n + z ⊙ h`, and the reset gate multiplies `U_n h`
/// inside the candidate nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_n: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_n: Matrix,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_n: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    /// `U_n h_prev`, before the reset gate is applied.
    pub un_h: Vec<f64>,
    pub h_next: Vec<f64>,
}

impl GruCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_z: Matrix::zeros(hidden, input),
            w_r: Matrix::zeros(hidden, input),
            w_n: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_n: Matrix::zeros(hidden, hidden),
            b_z: vec![0.0; hidden],
            b_r: vec![0.0; hidden],
            b_n: vec![0.0; hidden],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_z.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn forward(&self, x: &[f64], h_prev: &[f64]) -> Result<GruCache, ShapeError> {
        if h_prev.len() != self.hidden_dim() {
            return Err(ShapeError::new(
                "gru hidden state",
                format!("hidden[{}]", self.hidden_dim()),
                format!("vector[{}]", h_prev.len()),
            ));
        }
        let mut z = self.w_z.matvec(x)?;
        let mut r = self.w_r.matvec(x)?;
        let mut n = self.w_n.matvec(x)?;
        let uz = self.u_z.matvec(h_prev)?;
        let ur = self.u_r.matvec(h_prev)?;
        let un_h = self.u_n.matvec(h_prev)?;
        for i in 0..z.len() {
            z[i] = sigmoid(z[i] + uz[i] + self.b_z[i]);
            r[i] = sigmoid(r[i] + ur[i] + self.b_r[i]);
        }
        for i in 0..n.len() {
            n[i] = (n[i] + r[i] * un_h[i] + self.b_n[i]).tanh();
        }
        let h_next = (0..n.len())
            .map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i])
            .collect();
        Ok(GruCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
            un_h,
            h_next,
        })
    }

    /// Returns `(grad_x, grad_h_prev)`.
    pub fn backward(
        &self,
        cache: &GruCache,
        grad_h_next: &[f64],
        grads: &mut GruCell,
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden_dim();
        let mut grad_h = vec![0.0; hd];
        let mut da_z = vec![0.0; hd];
        let mut da_r = vec![0.0; hd];
        let mut da_n = vec![0.0; hd];
        let mut d_unh = vec![0.0; hd];
        for i in 0..hd {
            let g = grad_h_next[i];
            let (z, r, n) = (cache.z[i], cache.r[i], cache.n[i]);
            grad_h[i] = g * z;
            let dn = g * (1.0 - z);
            let dz = g * (cache.h_prev[i] - n);
            da_n[i] = dn * (1.0 - n * n);
            d_unh[i] = da_n[i] * r;
            let dr = da_n[i] * cache.un_h[i];
            da_z[i] = dz * z * (1.0 - z);
            da_r[i] = dr * r * (1.0 - r);
        }

        grads.w_z.add_outer(&da_z, &cache.x);
        grads.w_r.add_outer(&da_r, &cache.x);
        grads.w_n.add_outer(&da_n, &cache.x);
        grads.u_z.add_outer(&da_z, &cache.h_prev);
        grads.u_r.add_outer(&da_r, &cache.h_prev);
        grads.u_n.add_outer(&d_unh, &cache.h_prev);
        add_assign(&mut grads.b_z, &da_z);
        add_assign(&mut grads.b_r, &da_r);
        add_assign(&mut grads.b_n, &da_n);

        let mut grad_x = self.w_z.matvec_t(&da_z);
        add_assign(&mut grad_x, &self.w_r.matvec_t(&da_r));
        add_assign(&mut grad_x, &self.w_n.matvec_t(&da_n));

        add_assign(&mut grad_h, &self.u_z.matvec_t(&da_z));
        add_assign(&mut grad_h, &self.u_r.matvec_t(&da_r));
        add_assign(&mut grad_h, &self.u_n.matvec_t(&d_unh));
        (grad_x, grad_h)
    }
}

impl ParamSet for GruCell {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        for (name, m) in [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_n", &self.w_n),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_n", &self.u_n),
        ] {
            out.push((format!("{prefix}.{name}"), m.as_slice()));
        }
        out.push((format!("{prefix}.b_z"), &self.b_z));
        out.push((format!("{prefix}.b_r"), &self.b_r));
        out.push((format!("{prefix}.b_n"), &self.b_n));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.w_z"), self.w_z.as_mut_slice()));
        out.push((format!("{prefix}.w_r"), self.w_r.as_mut_slice()));
        out.push((format!("{prefix}.w_n"), self.w_n.as_mut_slice()));
        out.push((format!("{prefix}.u_z"), self.u_z.as_mut_slice()));
        out.push((format!("{prefix}.u_r"), self.u_r.as_mut_slice()));
        out.push((format!("{prefix}.u_n"), self.u_n.as_mut_slice()));
        out.push((format!("{prefix}.b_z"), &mut self.b_z));
        out.push((format!("{prefix}.b_r"), &mut self.b_r));
        out.push((format!("{prefix}.b_n"), &mut self.b_n));
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid expressed through its output.
pub fn sigmoid_backward(s: f64, grad: f64) -> f64 {
    grad * s * (1.0 - s)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(pre: &[f64], grad: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(grad)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Vector-Jacobian product of softmax given its output `p`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(grad_p)
        .map(|(&pi, &gi)| pi * (gi - inner))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::central_difference;
    use crate::rng::SeededRng;
    use rand::Rng;

    fn random_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn affine_identity_and_bias_passthrough() {
        let a = Affine::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        assert_eq!(a.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);

        let b0 = vec![0.5, -0.25];
        let a = Affine::new(Matrix::zeros(2, 4), b0.clone()).unwrap();
        assert_eq!(a.forward(&[9.0, 8.0, 7.0, 6.0]).unwrap(), b0);
        let mut g = Affine::zeros(4, 2);
        let gx = a.backward(&[9.0, 8.0, 7.0, 6.0], &[1.0, 1.0], &mut g);
        assert_eq!(gx, vec![0.0; 4]);
    }

    #[test]
    fn affine_shape_mismatch_is_reported() {
        let a = Affine::zeros(3, 2);
        let err = a.forward(&[1.0, 2.0]).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
        assert!(Affine::new(Matrix::zeros(2, 3), vec![0.0; 3]).is_err());
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = crate::rng::seeded(11);
        let w = random_matrix(&mut rng, 5, 7);
        let b = random_vec(&mut rng, 5);
        let x = random_vec(&mut rng, 7);
        let proj = random_vec(&mut rng, 5);
        let layer = Affine::new(w, b).unwrap();
        let loss = |l: &Affine, x: &[f64]| -> f64 {
            l.forward(x)
                .unwrap()
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grads = Affine::zeros(7, 5);
        let gx = layer.backward(&x, &proj, &mut grads);

        let mut worst: f64 = 0.0;
        for (name, idx, analytic) in grads
            .named()
            .into_iter()
            .flat_map(|(n, s)| s.iter().enumerate().map(move |(i, v)| (n.clone(), i, *v)).collect::<Vec<_>>())
        {
            let fd = central_difference(
                |p: &Affine| loss(p, &x),
                &layer,
                &name,
                idx,
                1e-6,
            );
            worst = worst.max(rel_err(analytic, fd));
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / 2e-6;
            worst = worst.max(rel_err(gx[i], fd));
        }
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gru_zero_weights_halves_previous_state() {
        let cell = GruCell::zeros(4, 4);
        let h = vec![1.0, -2.0, 0.5, 4.0];
        let out = cell.forward(&[3.0, 1.0, -1.0, 2.0], &h).unwrap();
        assert!(out.z.iter().all(|&z| z == 0.5));
        assert!(out.n.iter().all(|&n| n == 0.0));
        assert_eq!(out.h_next, vec![0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn gru_saturated_update_gate_keeps_state() {
        let mut rng = crate::rng::seeded(3);
        let mut cell = GruCell::zeros(4, 4);
        cell.w_n = random_matrix(&mut rng, 4, 4);
        cell.b_z = vec![1e3; 4];
        let h = random_vec(&mut rng, 4);
        let out = cell.forward(&random_vec(&mut rng, 4), &h).unwrap();
        for (a, b) in out.h_next.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let d = 8;
        let mut rng = crate::rng::seeded(5);
        let mut cell = GruCell::zeros(d, d);
        for (_, t) in cell.named_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
        let x = random_vec(&mut rng, d);
        let h = random_vec(&mut rng, d);
        let proj = random_vec(&mut rng, d);
        let loss = |c: &GruCell, x: &[f64], h: &[f64]| -> f64 {
            let o = c.forward(x, h).unwrap();
            o.h_next.iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let cache = cell.forward(&x, &h).unwrap();
        let mut grads = cell.zeros_like();
        let (gx, gh) = cell.backward(&cache, &proj, &mut grads);

        let mut worst: f64 = 0.0;
        for (name, slice) in grads.named() {
            for (i, &a) in slice.iter().enumerate() {
                let fd = central_difference(|p: &GruCell| loss(p, &x, &h), &cell, &name, i, 1e-5);
                worst = worst.max(rel_err(a, fd));
            }
        }
        for i in 0..d {
            let step = 1e-5;
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += step;
            xm[i] -= step;
            worst = worst.max(rel_err(gx[i], (loss(&cell, &xp, &h) - loss(&cell, &xm, &h)) / (2.0 * step)));
            let (mut hp, mut hm) = (h.clone(), h.clone());
            hp[i] += step;
            hm[i] -= step;
            worst = worst.max(rel_err(gh[i], (loss(&cell, &x, &hp) - loss(&cell, &x, &hm)) / (2.0 * step)));
        }
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn activations_closed_forms() {
        let p = softmax(&[0.0; 17]);
        assert!(p.iter().all(|&v| (v - 1.0 / 17.0).abs() < 1e-15));
        assert_eq!(sigmoid(0.0), 0.5);
        let p = softmax(&[1.0, 2.0, 3.0]);
        // e^v / Σe^v, evaluated independently.
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in p.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(relu(&[-1.0, 0.0, 2.5]), vec![0.0, 0.0, 2.5]);
    }

    #[test]
    fn activation_backwards_match_finite_differences() {
        let v = [0.3, -1.2, 2.0, 0.7];
        let w = [1.0, -0.5, 0.25, 2.0];
        let p = softmax(&v);
        let g = softmax_backward(&p, &w);
        for i in 0..v.len() {
            let f = |vv: &[f64]| softmax(vv).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let (mut vp, mut vm) = (v, v);
            vp[i] += 1e-6;
            vm[i] -= 1e-6;
            let fd = (f(&vp) - f(&vm)) / 2e-6;
            assert!(rel_err(g[i], fd) < 1e-6);
        }
        let s = sigmoid(0.4);
        let fd = (sigmoid(0.4 + 1e-6) - sigmoid(0.4 - 1e-6)) / 2e-6;
        assert!(rel_err(sigmoid_backward(s, 1.0), fd) < 1e-8);
        let g = relu_backward(&[-1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(g, vec![0.0, 4.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
