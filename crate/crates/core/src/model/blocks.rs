//! Tape builders for the estimator's neural components: gated convolutions,
//! the three-scale U-Net, pre-norm multi-head attention, and the pointwise
//! MLP. Every builder binds its parameters by name so repeated forward
//! passes reuse the same store entries.

use crate::nn::{Bound, Conv2dCfg, Init, ParamStore, Scalar, Tape, Tid};

pub(crate) struct Ctx<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    pub store: &'a mut ParamStore<F>,
    pub bound: &'a mut Bound,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Tid {
        self.bound.bind(self.tape, self.store, name, shape, init)
    }

    /// 3x3 convolution; `zero_init` produces an identity-at-start residual
    /// head.
    pub fn conv3(
        &mut self,
        name: &str,
        x: Tid,
        cin: usize,
        cout: usize,
        stride: usize,
        zero_init: bool,
    ) -> Tid {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::KaimingNormal { fan_in: cin * 9 }
        };
        let w = self.param(&format!("{name}.w"), &[cout, cin, 3, 3], init);
        let b = self.param(&format!("{name}.b"), &[cout], Init::Zeros);
        self.tape.conv2d(x, w, b, Conv2dCfg { stride, pad: 1 })
    }

    /// Gated convolution: a 3x3 conv to 2*cout channels followed by a GLU.
    pub fn gated_conv(&mut self, name: &str, x: Tid, cin: usize, cout: usize, stride: usize) -> Tid {
        let c = self.conv3(name, x, cin, 2 * cout, stride, false);
        self.tape.glu(c, 1)
    }

    /// Two gated convolutions at constant resolution.
    pub fn gated_block(&mut self, name: &str, x: Tid, cin: usize, cout: usize) -> Tid {
        let a = self.gated_conv(&format!("{name}.c1"), x, cin, cout, 1);
        self.gated_conv(&format!("{name}.c2"), a, cout, cout, 1)
    }

    /// Three-scale gated U-Net over the last two axes.
    pub fn unet(
        &mut self,
        name: &str,
        x: Tid,
        cin: usize,
        cout: usize,
        widths: [usize; 3],
        zero_head: bool,
    ) -> Tid {
        let [w1, w2, w3] = widths;
        let e1 = self.gated_block(&format!("{name}.e1"), x, cin, w1);
        let e1_shape = self.tape.shape(e1).to_vec();
        let d1 = self.gated_conv(&format!("{name}.d1"), e1, w1, w2, 2);
        let e2 = self.gated_block(&format!("{name}.e2"), d1, w2, w2);
        let e2_shape = self.tape.shape(e2).to_vec();
        let d2 = self.gated_conv(&format!("{name}.d2"), e2, w2, w3, 2);
        let bott = self.gated_block(&format!("{name}.bott"), d2, w3, w3);

        let u2 = self.tape.upsample_nearest(bott, e2_shape[2], e2_shape[3]);
        let c2 = self.tape.cat(&[u2, e2], 1);
        let m2 = self.gated_block(&format!("{name}.u2"), c2, w3 + w2, w2);
        let u1 = self.tape.upsample_nearest(m2, e1_shape[2], e1_shape[3]);
        let c1 = self.tape.cat(&[u1, e1], 1);
        let m1 = self.gated_block(&format!("{name}.u1"), c1, w2 + w1, w1);
        self.conv3(&format!("{name}.head"), m1, w1, cout, 1, zero_head)
    }

    pub fn layer_norm(&mut self, name: &str, x: Tid, e: usize) -> Tid {
        let gamma = self.param(&format!("{name}.gamma"), &[e], Init::Ones);
        let beta = self.param(&format!("{name}.beta"), &[e], Init::Zeros);
        self.tape.layer_norm(x, gamma, beta, 1e-5)
    }

    fn linear(&mut self, name: &str, x: Tid, din: usize, dout: usize) -> Tid {
        let w = self.param(&format!("{name}.w"), &[din, dout], Init::Normal { std: 0.02 });
        let b = self.param(&format!("{name}.b"), &[dout], Init::Zeros);
        self.tape.linear(x, w, b)
    }

    /// Pre-norm multi-head self-attention with a residual connection.
    /// `x` is `[..., tokens, e]`.
    pub fn mha(&mut self, name: &str, x: Tid, e: usize, heads: usize) -> Tid {
        assert!(e % heads == 0, "e must divide into heads");
        let dh = e / heads;
        let shape = self.tape.shape(x).to_vec();
        let rank = shape.len();
        let tokens = shape[rank - 2];
        let lead: usize = shape[..rank - 2].iter().product();

        let ln = self.layer_norm(&format!("{name}.ln"), x, e);
        let q = self.linear(&format!("{name}.q"), ln, e, e);
        let k = self.linear(&format!("{name}.k"), ln, e, e);
        let v = self.linear(&format!("{name}.v"), ln, e, e);

        let split = |ctx: &mut Self, t: Tid| {
            let r = ctx.tape.reshape(t, &[lead, tokens, heads, dh]);
            ctx.tape.permute(r, &[0, 2, 1, 3])
        };
        let qh = split(self, q);
        let kh = split(self, k);
        let vh = split(self, v);
        let kt = self.tape.permute(kh, &[0, 1, 3, 2]);
        let scores = self.tape.matmul(qh, kt);
        let scaled = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = self.tape.softmax(scaled);
        let ctxv = self.tape.matmul(attn, vh);
        let merged = self.tape.permute(ctxv, &[0, 2, 1, 3]);
        let flat = self.tape.reshape(merged, &shape);
        let out = self.linear(&format!("{name}.o"), flat, e, e);
        self.tape.add(x, out)
    }

    /// Pre-norm pointwise MLP (e -> 4e -> e) with a residual connection.
    pub fn mlp(&mut self, name: &str, x: Tid, e: usize) -> Tid {
        let ln = self.layer_norm(&format!("{name}.ln"), x, e);
        let h = self.linear(&format!("{name}.fc1"), ln, e, 4 * e);
        let a = self.tape.silu(h);
        let out = self.linear(&format!("{name}.fc2"), a, 4 * e, e);
        self.tape.add(x, out)
    }
}
