use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::data::DAYS_PER_WEEK;
use crate::error::{MerlinError, Result};
use crate::rng::rng_from;
use crate::tensor::{concat_last, Tape, Tensor, Var};

/// Dropout switch for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters of one STID model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StidConfig {
    pub n_vars: usize,
    pub n_history: usize,
    pub n_future: usize,
    pub n_channels: usize,
    pub steps_per_day: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for StidConfig {
    fn default() -> Self {
        Self {
            n_vars: 8,
            n_history: 12,
            n_future: 12,
            n_channels: 1,
            steps_per_day: 288,
            embed_dim: 64,
            layers: 3,
            dropout: 0.15,
        }
    }
}

impl StidConfig {
    /// Width after concatenating the input embedding with the three identities.
    pub fn hidden_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_vars", self.n_vars),
            ("n_history", self.n_history),
            ("n_future", self.n_future),
            ("n_channels", self.n_channels),
            ("steps_per_day", self.steps_per_day),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(MerlinError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MerlinError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Residual MLP block weights, all `[4D, 4D]` / `[4D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Learnable parameters of one STID model.
#[derive(Debug, Clone, PartialEq)]
pub struct StidParams {
    pub config: StidConfig,
    pub w_embed: Tensor,
    pub b_embed: Tensor,
    pub spatial: Tensor,
    pub tod_table: Tensor,
    pub dow_table: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub w_reg: Tensor,
    pub b_reg: Tensor,
}

pub(crate) fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl StidParams {
    pub fn init(config: &StidConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.hidden_dim();
        let input = config.n_history * config.n_channels;
        let rng = |tag: u64| rng_from(seed, &[0x571d, tag]);
        let blocks = (0..config.layers)
            .map(|l| {
                let mut r = rng(100 + l as u64);
                EncoderBlock {
                    w1: fan_in_uniform(&mut r, &[h, h], h),
                    b1: fan_in_uniform(&mut r, &[h], h),
                    w2: fan_in_uniform(&mut r, &[h, h], h),
                    b2: fan_in_uniform(&mut r, &[h], h),
                }
            })
            .collect();
        let mut r_embed = rng(1);
        let mut r_reg = rng(2);
        Ok(Self {
            config: config.clone(),
            w_embed: fan_in_uniform(&mut r_embed, &[input, d], input),
            b_embed: fan_in_uniform(&mut r_embed, &[d], input),
            spatial: uniform(&mut rng(3), &[config.n_vars, d], 0.1),
            tod_table: uniform(&mut rng(4), &[config.steps_per_day, d], 0.1),
            dow_table: uniform(&mut rng(5), &[DAYS_PER_WEEK, d], 0.1),
            blocks,
            w_reg: fan_in_uniform(&mut r_reg, &[h, config.n_future], h),
            b_reg: fan_in_uniform(&mut r_reg, &[config.n_future], h),
        })
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.w".to_string(), &self.w_embed),
            ("embed.b".to_string(), &self.b_embed),
            ("spatial".to_string(), &self.spatial),
            ("tod_table".to_string(), &self.tod_table),
            ("dow_table".to_string(), &self.dow_table),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("enc{i}.w1"), &b.w1));
            out.push((format!("enc{i}.b1"), &b.b1));
            out.push((format!("enc{i}.w2"), &b.w2));
            out.push((format!("enc{i}.b2"), &b.b2));
        }
        out.push(("reg.w".to_string(), &self.w_reg));
        out.push(("reg.b".to_string(), &self.b_reg));
        out
    }

    /// Mutable view in the same order as [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.w_embed,
            &mut self.b_embed,
            &mut self.spatial,
            &mut self.tod_table,
            &mut self.dow_table,
        ];
        for b in &mut self.blocks {
            out.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        out.push(&mut self.w_reg);
        out.push(&mut self.b_reg);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on `tape`, trainable or frozen.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundStid<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        BoundStid {
            config: self.config.clone(),
            w_embed: put(&self.w_embed),
            b_embed: put(&self.b_embed),
            spatial: put(&self.spatial),
            tod_table: put(&self.tod_table),
            dow_table: put(&self.dow_table),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    w1: put(&b.w1),
                    b1: put(&b.b1),
                    w2: put(&b.w2),
                    b2: put(&b.b2),
                })
                .collect(),
            w_reg: put(&self.w_reg),
            b_reg: put(&self.b_reg),
        }
    }

    /// Eval-mode forward without gradient bookkeeping.
    pub fn predict(&self, x: &Tensor, tod: &[usize], dow: &[usize]) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let model = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = model.forward(xv, tod, dow, Mode::Eval, &mut rng_from(0, &[]))?;
        Ok(((*out.y.value()).clone(), (*out.h_final.value()).clone()))
    }

    pub fn export(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let c = &self.config;
        for (k, v) in [
            ("n_vars", c.n_vars),
            ("n_history", c.n_history),
            ("n_future", c.n_future),
            ("n_channels", c.n_channels),
            ("steps_per_day", c.steps_per_day),
            ("embed_dim", c.embed_dim),
            ("layers", c.layers),
        ] {
            ckpt.set_meta(&format!("{prefix}{k}"), v as u64);
        }
        ckpt.insert(&format!("{prefix}dropout"), Tensor::scalar(c.dropout));
        for (name, t) in self.named() {
            ckpt.insert(&format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn import(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let meta = |k: &str| ckpt.meta_usize(&format!("{prefix}{k}"));
        let config = StidConfig {
            n_vars: meta("n_vars")?,
            n_history: meta("n_history")?,
            n_future: meta("n_future")?,
            n_channels: meta("n_channels")?,
            steps_per_day: meta("steps_per_day")?,
            embed_dim: meta("embed_dim")?,
            layers: meta("layers")?,
            dropout: ckpt.tensor(&format!("{prefix}dropout"))?.item(),
        };
        let mut params = Self::init(&config, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = ckpt.tensor(&format!("{prefix}{name}"))?;
            if t.shape() != slot.shape() {
                return Err(MerlinError::Checkpoint(format!(
                    "{prefix}{name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(params)
    }
}

pub struct BoundBlock<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// Parameters placed on a tape, ready for a forward pass.
pub struct BoundStid<'t> {
    pub config: StidConfig,
    pub w_embed: Var<'t>,
    pub b_embed: Var<'t>,
    pub spatial: Var<'t>,
    pub tod_table: Var<'t>,
    pub dow_table: Var<'t>,
    pub blocks: Vec<BoundBlock<'t>>,
    pub w_reg: Var<'t>,
    pub b_reg: Var<'t>,
}

/// Forecast and the final encoder state that produced it.
pub struct StidOutput<'t> {
    /// `[batch, n_vars, n_future]`
    pub y: Var<'t>,
    /// `[batch, n_vars, 4D]`, the regression layer's input.
    pub h_final: Var<'t>,
}

impl<'t> BoundStid<'t> {
    /// All bound parameters, in [`StidParams::named`] order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = vec![
            self.w_embed,
            self.b_embed,
            self.spatial,
            self.tod_table,
            self.dow_table,
        ];
        for b in &self.blocks {
            out.extend([b.w1, b.b1, b.w2, b.b2]);
        }
        out.push(self.w_reg);
        out.push(self.b_reg);
        out
    }

    /// Rebuilds a bound model from variables in [`Self::vars`] order.
    pub fn from_vars(config: &StidConfig, vars: &[Var<'t>]) -> Result<Self> {
        let expected = 7 + 4 * config.layers;
        if vars.len() != expected {
            return Err(MerlinError::Usage(format!(
                "{} variables given, {expected} expected",
                vars.len()
            )));
        }
        let blocks = vars[5..5 + 4 * config.layers]
            .chunks_exact(4)
            .map(|c| BoundBlock { w1: c[0], b1: c[1], w2: c[2], b2: c[3] })
            .collect();
        Ok(Self {
            config: config.clone(),
            w_embed: vars[0],
            b_embed: vars[1],
            spatial: vars[2],
            tod_table: vars[3],
            dow_table: vars[4],
            blocks,
            w_reg: vars[expected - 2],
            b_reg: vars[expected - 1],
        })
    }

    /// `[batch, n_vars, n_history, n_channels]` → `[batch, n_vars, D]`.
    pub fn embed_input(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.n_vars || shape[2] != c.n_history || shape[3] != c.n_channels {
            return Err(MerlinError::Dimension(format!(
                "input {shape:?} does not match [batch, {}, {}, {}]",
                c.n_vars, c.n_history, c.n_channels
            )));
        }
        let flat = x.reshape(&[shape[0], c.n_vars, c.n_history * c.n_channels])?;
        flat.linear(&self.w_embed, &self.b_embed)
    }

    /// Concatenates `h` with the spatial, time-of-day and day-of-week rows.
    pub fn attach_identities(&self, h: Var<'t>, tod: &[usize], dow: &[usize]) -> Result<Var<'t>> {
        let shape = h.shape();
        let batch = shape[0];
        if tod.len() != batch || dow.len() != batch {
            return Err(MerlinError::Dimension(format!(
                "{} tod / {} dow indices for batch of {batch}",
                tod.len(),
                dow.len()
            )));
        }
        let n_vars = self.config.n_vars;
        let spatial = self.spatial.broadcast_leading(batch)?;
        let day = self.tod_table.gather_expand(tod, n_vars)?;
        let week = self.dow_table.gather_expand(dow, n_vars)?;
        concat_last(&[h, spatial, day, week])
    }

    pub fn encoder_block<R: Rng + ?Sized>(
        &self,
        h: Var<'t>,
        layer: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let b = &self.blocks[layer];
        let inner = h
            .linear(&b.w1, &b.b1)?
            .relu()
            .dropout(self.config.dropout, mode == Mode::Train, rng)?;
        inner.linear(&b.w2, &b.b2)?.add(&h)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: Var<'t>,
        tod: &[usize],
        dow: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<StidOutput<'t>> {
        let h = self.embed_input(x)?;
        let mut h = self.attach_identities(h, tod, dow)?;
        for layer in 0..self.blocks.len() {
            h = self.encoder_block(h, layer, mode, rng)?;
        }
        let y = h.linear(&self.w_reg, &self.b_reg)?;
        Ok(StidOutput { y, h_final: h })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, scalar_fn};

    fn small() -> StidConfig {
        StidConfig {
            n_vars: 3,
            n_history: 12,
            n_future: 12,
            n_channels: 1,
            steps_per_day: 24,
            embed_dim: 8,
            layers: 2,
            dropout: 0.15,
        }
    }

    fn input(batch: usize, cfg: &StidConfig, seed: u64) -> Tensor {
        let mut r = rng_from(seed, &[]);
        uniform(&mut r, &[batch, cfg.n_vars, cfg.n_history, 1], 1.0)
    }

    #[test]
    fn table_defaults() {
        let c = StidConfig::default();
        assert_eq!((c.embed_dim, c.layers, c.dropout), (64, 3, 0.15));
        let p = StidParams::init(&StidConfig { n_vars: 2, steps_per_day: 24, ..c }, 0).unwrap();
        let tape = Tape::new();
        let m = p.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 2, 12, 1]));
        let h = m.embed_input(x).unwrap();
        assert_eq!(h.shape(), vec![1, 2, 64]);
        let he = m.attach_identities(h, &[0], &[0]).unwrap();
        assert_eq!(he.shape(), vec![1, 2, 256]);
        assert_eq!(p.blocks.len(), 3);
    }

    #[test]
    fn zero_input_zero_bias_embeds_to_zero() {
        let mut p = StidParams::init(&small(), 1).unwrap();
        p.b_embed = Tensor::zeros(&[8]);
        let tape = Tape::new();
        let m = p.bind(&tape, false);
        let h = m.embed_input(tape.constant(Tensor::zeros(&[2, 3, 12, 1]))).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes_and_eval_determinism() {
        let cfg = small();
        let p = StidParams::init(&cfg, 2).unwrap();
        let x = input(5, &cfg, 3);
        let tod = [0, 5, 7, 23, 1];
        let dow = [0, 1, 2, 3, 6];
        let (y1, h1) = p.predict(&x, &tod, &dow).unwrap();
        let (y2, h2) = p.predict(&x, &tod, &dow).unwrap();
        assert_eq!(y1.shape(), &[5, 3, 12]);
        assert_eq!(h1.shape(), &[5, 3, 32]);
        assert_eq!((y1, h1), (y2, h2));
    }

    #[test]
    fn identity_indices_out_of_range() {
        let cfg = small();
        let p = StidParams::init(&cfg, 2).unwrap();
        let x = input(1, &cfg, 3);
        assert!(matches!(p.predict(&x, &[24], &[0]), Err(MerlinError::Data(_))));
        assert!(matches!(p.predict(&x, &[0], &[7]), Err(MerlinError::Data(_))));
        let bad = Tensor::zeros(&[1, 2, 12, 1]);
        assert!(matches!(p.predict(&bad, &[0], &[0]), Err(MerlinError::Dimension(_))));
    }

    #[test]
    fn zero_blocks_are_identity() {
        let cfg = small();
        let mut p = StidParams::init(&cfg, 4).unwrap();
        for b in &mut p.blocks {
            for t in [&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2] {
                t.data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let m = p.bind(&tape, false);
        let h0 = tape.constant(input(2, &StidConfig { n_history: 32, ..cfg.clone() }, 5).reshape(&[2, 3, 32]).unwrap());
        let mut rng = rng_from(0, &[]);
        let mut h = h0;
        for l in 0..2 {
            h = m.encoder_block(h, l, Mode::Train, &mut rng).unwrap();
        }
        assert_eq!(h.value().data(), h0.value().data());
    }

    #[test]
    fn identity_rows_follow_indices() {
        let cfg = small();
        let p = StidParams::init(&cfg, 6).unwrap();
        let tape = Tape::new();
        let m = p.bind(&tape, false);
        let h = tape.constant(Tensor::zeros(&[3, 3, 8]));
        let he = m.attach_identities(h, &[4, 9, 4], &[2, 5, 2]).unwrap().value();
        let row = |b: usize, v: usize| he.data()[(b * 3 + v) * 32..(b * 3 + v + 1) * 32].to_vec();
        // equal (tod, dow) → equal temporal parts
        assert_eq!(row(0, 1)[16..], row(2, 1)[16..]);
        // spatial identity is positional
        for b in 0..3 {
            assert_eq!(row(b, 2)[8..16], p.spatial.data()[16..24]);
        }
        assert_eq!(row(1, 0)[16..24], p.tod_table.data()[9 * 8..10 * 8]);
    }

    #[test]
    fn batch_permutation_commutes() {
        let cfg = small();
        let p = StidParams::init(&cfg, 7).unwrap();
        let x = input(3, &cfg, 8);
        let (y, _) = p.predict(&x, &[1, 2, 3], &[4, 5, 6]).unwrap();
        let perm = [2, 0, 1];
        let xp = Tensor::stack(&perm.map(|i| x.index_leading(i))).unwrap();
        let (yp, _) = p.predict(&xp, &[3, 1, 2], &[6, 4, 5]).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(yp.index_leading(k), y.index_leading(i));
        }
    }

    #[test]
    fn variable_swap_with_spatial_swap_is_equivariant() {
        let cfg = small();
        let p = StidParams::init(&cfg, 9).unwrap();
        let x = input(2, &cfg, 10);
        let (y, _) = p.predict(&x, &[1, 2], &[3, 4]).unwrap();
        let swap = |t: &Tensor, inner: usize| {
            let mut out = t.clone();
            let outer = t.numel() / (3 * inner);
            for o in 0..outer {
                let base = o * 3 * inner;
                for k in 0..inner {
                    out.data_mut()[base + k] = t.data()[base + inner + k];
                    out.data_mut()[base + inner + k] = t.data()[base + k];
                }
            }
            out
        };
        let mut q = p.clone();
        q.spatial = swap(&p.spatial, 8);
        let (ys, _) = q.predict(&swap(&x, 12), &[1, 2], &[3, 4]).unwrap();
        assert_eq!(swap(&ys, 12), y);
    }

    #[test]
    fn tod_row_change_only_affects_matching_samples() {
        let cfg = small();
        let p = StidParams::init(&cfg, 11).unwrap();
        let x = input(2, &cfg, 12);
        let (y, _) = p.predict(&x, &[5, 6], &[0, 0]).unwrap();
        let mut q = p.clone();
        q.tod_table.data_mut()[5 * 8] += 0.5;
        let (yq, _) = q.predict(&x, &[5, 6], &[0, 0]).unwrap();
        assert_ne!(yq.index_leading(0), y.index_leading(0));
        assert_eq!(yq.index_leading(1), y.index_leading(1));
    }

    #[test]
    fn mean_forecast_gradient_wrt_embedding_matches_finite_differences() {
        let cfg = small();
        let p = StidParams::init(&cfg, 13).unwrap();
        let x = input(2, &cfg, 14);
        let f = scalar_fn(move |tape, w_embed| {
            let m = p.bind(tape, false);
            let m = BoundStid { w_embed, ..m };
            let xv = tape.constant(x.clone());
            let out = m.forward(xv, &[3, 17], &[1, 5], Mode::Train, &mut rng_from(99, &[]))?;
            Ok(out.y.mean())
        });
        let w = StidParams::init(&cfg, 13).unwrap().w_embed;
        let err = grad_check(f, &w, 1e-6).unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
