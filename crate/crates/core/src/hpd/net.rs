//! Generator network: fixed noise rows in, one row of logits per mixture
//! component out.
//!
//! `h1 = [relu(z W1 + b1), z]`, `h2 = [relu(h1 W2 + b2), h1]`,
//! `out = h2 W3 + b3`. Parameters live in one flat vector so the optimizer
//! and the output average treat both variants alike.

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::privacy::NoiseSource;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub latent: usize,
    pub hidden: (usize, usize),
    pub out: usize,
}

impl NetShape {
    fn widths(&self) -> [(usize, usize); 3] {
        let (h1, h2) = self.hidden;
        let in2 = h1 + self.latent;
        let in3 = h2 + in2;
        [(self.latent, h1), (in2, h2), (in3, self.out)]
    }

    pub fn n_params(&self) -> usize {
        self.widths().iter().map(|(i, o)| i * o + o).sum()
    }

    /// `(weight start, bias start)` of each layer.
    fn offsets(&self) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        let mut at = 0;
        for (slot, (i, o)) in out.iter_mut().zip(self.widths()) {
            *slot = (at, at + i * o);
            at += i * o + o;
        }
        out
    }
}

/// Forward activations kept for the backward pass.
pub struct Cache<T> {
    a1: Array2<T>,
    h1: Array2<T>,
    a2: Array2<T>,
    h2: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet<T> {
    shape: NetShape,
    z: Array2<T>,
}

fn relu<T: Scalar>(a: &Array2<T>) -> Array2<T> {
    a.mapv(|x| if x > T::zero() { x } else { T::zero() })
}

impl<T: Scalar> GeneratorNet<T> {
    /// Draws the fixed noise (`rows × latent`) and initial weights. Hidden
    /// layers use `N(0, 1/fan_in)`; the output layer is scaled by 0.01 so
    /// the first tables are close to uniform.
    pub fn new(rows: usize, shape: NetShape, rng: &mut NoiseSource) -> (Self, Vec<T>) {
        let z = Self::draw_noise(rows, shape.latent, rng);
        let mut params = vec![T::zero(); shape.n_params()];
        for (layer, ((fan_in, fan_out), (w, _))) in shape.widths().into_iter().zip(shape.offsets()).enumerate() {
            let scale = if layer == 2 { 0.01 } else { 1.0 };
            let normal = Normal::new(0.0, scale / (fan_in as f64).sqrt()).expect("valid std");
            for p in &mut params[w..w + fan_in * fan_out] {
                *p = T::of(normal.sample(rng));
            }
        }
        (Self { shape, z }, params)
    }

    pub fn from_parts(shape: NetShape, z: Array2<T>) -> Self {
        Self { shape, z }
    }

    pub fn draw_noise(rows: usize, latent: usize, rng: &mut NoiseSource) -> Array2<T> {
        let normal = rand_distr::StandardNormal;
        Array2::from_shape_fn((rows, latent), |_| T::of(Distribution::<f64>::sample(&normal, rng)))
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn noise(&self) -> &Array2<T> {
        &self.z
    }

    pub fn set_noise(&mut self, z: Array2<T>) {
        assert_eq!(z.dim(), self.z.dim());
        self.z = z;
    }

    fn layer<'p>(&self, params: &'p [T], i: usize) -> (ArrayView2<'p, T>, ArrayView1<'p, T>) {
        let (fan_in, fan_out) = self.shape.widths()[i];
        let (w, b) = self.shape.offsets()[i];
        (
            ArrayView2::from_shape((fan_in, fan_out), &params[w..w + fan_in * fan_out]).expect("weight block"),
            ArrayView1::from(&params[b..b + fan_out]),
        )
    }

    pub fn forward(&self, params: &[T]) -> (Vec<T>, Cache<T>) {
        assert_eq!(params.len(), self.shape.n_params());
        let (w1, b1) = self.layer(params, 0);
        let (w2, b2) = self.layer(params, 1);
        let (w3, b3) = self.layer(params, 2);
        let a1 = self.z.dot(&w1) + &b1;
        let h1 = concatenate(Axis(1), &[relu(&a1).view(), self.z.view()]).expect("same rows");
        let a2 = h1.dot(&w2) + &b2;
        let h2 = concatenate(Axis(1), &[relu(&a2).view(), h1.view()]).expect("same rows");
        let out = h2.dot(&w3) + &b3;
        let logits = out.into_iter().collect();
        (logits, Cache { a1, h1, a2, h2 })
    }

    pub fn logits(&self, params: &[T]) -> Vec<T> {
        self.forward(params).0
    }

    /// Gradient with respect to the parameters given `dlogits`
    /// (row-major, `rows × out`).
    pub fn backward(&self, params: &[T], cache: &Cache<T>, dlogits: &[T]) -> Vec<T> {
        let (h1w, h2w) = self.shape.hidden;
        let rows = self.z.nrows();
        let mut grad = vec![T::zero(); params.len()];
        let d_out = ArrayView2::from_shape((rows, self.shape.out), dlogits).expect("dlogits shape");
        let offs = self.shape.offsets();
        let write = |grad: &mut [T], i: usize, dw: Array2<T>, db: ndarray::Array1<T>| {
            let (w, b) = offs[i];
            for (g, v) in grad[w..].iter_mut().zip(dw.iter()) {
                *g = *v;
            }
            for (g, v) in grad[b..].iter_mut().zip(db.iter()) {
                *g = *v;
            }
        };

        let (w3, _) = self.layer(params, 2);
        write(&mut grad, 2, cache.h2.t().dot(&d_out), d_out.sum_axis(Axis(0)));
        let d_h2 = d_out.dot(&w3.t());
        let mut d_a2 = d_h2.slice(s![.., ..h2w]).to_owned();
        d_a2.zip_mut_with(&cache.a2, |d, &a| {
            if a <= T::zero() {
                *d = T::zero();
            }
        });
        let (w2, _) = self.layer(params, 1);
        write(&mut grad, 1, cache.h1.t().dot(&d_a2), d_a2.sum_axis(Axis(0)));
        let mut d_h1 = d_h2.slice(s![.., h2w..]).to_owned();
        d_h1 = d_h1 + d_a2.dot(&w2.t());
        let mut d_a1 = d_h1.slice(s![.., ..h1w]).to_owned();
        d_a1.zip_mut_with(&cache.a1, |d, &a| {
            if a <= T::zero() {
                *d = T::zero();
            }
        });
        write(&mut grad, 0, self.z.t().dot(&d_a1), d_a1.sum_axis(Axis(0)));
        grad
    }
}
