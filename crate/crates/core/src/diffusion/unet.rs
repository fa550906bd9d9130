//! Pose-conditioned U-Net noise predictor.
//!
//! The network is described once as a list of blocks holding indices into a
//! flat parameter list. The same description drives parameter naming,
//! initialization and the forward pass, so names and shapes follow from the
//! config alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, seeded_normal, Float, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Spatial sizes at which encoder and decoder levels get attention. The
    /// bottleneck always has one.
    pub attention_resolutions: Vec<usize>,
    pub groupnorm_groups: usize,
    pub embed_dim: usize,
    pub pose_count: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            res_blocks_per_level: 2,
            attention_resolutions: vec![16, 8],
            groupnorm_groups: 8,
            embed_dim: 128,
            pose_count: 8,
        }
    }
}

impl UNetConfig {
    /// 8×8 network small enough for exhaustive finite-difference checks.
    pub fn tiny(pose_count: usize) -> Self {
        Self {
            image_size: 8,
            in_channels: 3,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            res_blocks_per_level: 1,
            attention_resolutions: vec![4],
            groupnorm_groups: 2,
            embed_dim: 8,
            pose_count,
        }
    }

    /// 32×32 network sized for single-core training runs.
    pub fn toy(pose_count: usize) -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            res_blocks_per_level: 1,
            attention_resolutions: vec![8],
            groupnorm_groups: 4,
            embed_dim: 64,
            pose_count,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(format!("unet config: {msg}")));
        if self.levels() == 0 {
            return fail("channel_multipliers is empty".into());
        }
        if self.channel_multipliers.contains(&0) {
            return fail("channel multipliers must be positive".into());
        }
        if self.image_size == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return fail("image_size, in_channels and base_channels must be positive".into());
        }
        let div = 1usize << (self.levels() - 1);
        if self.image_size % div != 0 {
            return fail(format!(
                "image_size {} is not divisible by 2^(levels-1) = {div}",
                self.image_size
            ));
        }
        if self.groupnorm_groups == 0 {
            return fail("groupnorm_groups must be positive".into());
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return fail(format!(
                "embed_dim {} must be even and positive",
                self.embed_dim
            ));
        }
        if self.pose_count == 0 {
            return fail("pose_count must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `gain / √fan_in`.
    Fan {
        fan_in: usize,
        gain: f64,
    },
    Normal {
        std: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    scale: usize,
    shift: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb_scale: Linear,
    emb_shift: Linear,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    /// Position among the cross-frame layers, if this is one.
    cfa: Option<usize>,
}

#[derive(Clone, Debug)]
enum Block {
    Res(ResBlock),
    Attn(AttnBlock),
    Down(Conv),
    Up(Conv),
    /// Push the current activation onto the skip stack.
    Save,
    /// Concatenate the most recent skip activation along channels.
    Merge,
}

/// Keys and values of one attention layer, each `[batch, tokens, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvPair<T: Float = f32> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// How bottleneck and decoder attention layers pick their keys and values.
#[derive(Clone, Copy, Debug)]
pub enum AttnMode<'a, T: Float = f32> {
    Standard,
    /// Standard attention that also reports each layer's keys and values.
    Record,
    /// Keys and values come from `kv` (one entry per cross-frame layer,
    /// batch 1 or matching). `hard` replaces softmax by arg-max selection.
    Reference {
        kv: &'a [KvPair<T>],
        hard: bool,
    },
}

pub struct UNetOutput<T: Float> {
    pub eps: Var,
    /// Filled only in [`AttnMode::Record`].
    pub kv: Vec<KvPair<T>>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    specs: Vec<ParamSpec>,
    time1: Linear,
    time2: Linear,
    pose_table: usize,
    conv_in: Conv,
    blocks: Vec<Block>,
    out_norm: Norm,
    conv_out: Conv,
    cfa_layers: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    groups: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Conv {
        Conv {
            w: self.add(
                format!("{name}.weight"),
                &[cout, cin, k, k],
                Init::Fan {
                    fan_in: cin * k * k,
                    gain,
                },
            ),
            b: self.add(format!("{name}.bias"), &[cout], Init::Zeros),
            stride,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> Linear {
        Linear {
            w: self.add(
                format!("{name}.weight"),
                &[din, dout],
                Init::Fan { fan_in: din, gain },
            ),
            b: self.add(format!("{name}.bias"), &[dout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        if c % self.groups != 0 {
            return Err(Error::invalid(format!(
                "unet config: {} groups do not divide {c} channels at {name}",
                self.groups
            )));
        }
        Ok(Norm {
            scale: self.add(format!("{name}.scale"), &[c], Init::Ones),
            shift: self.add(format!("{name}.shift"), &[c], Init::Zeros),
        })
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> Result<ResBlock> {
        let norm1 = self.norm(&format!("{name}.norm1"), cin)?;
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, 1.0);
        if cout % self.groups != 0 {
            return Err(Error::invalid(format!(
                "unet config: {} groups do not divide {cout} channels at {name}",
                self.groups
            )));
        }
        let emb_scale = self.linear(&format!("{name}.emb_scale"), emb, cout, 0.5);
        let emb_shift = self.linear(&format!("{name}.emb_shift"), emb, cout, 0.5);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 0.5);
        let skip = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, 1.0));
        Ok(ResBlock {
            norm1,
            conv1,
            emb_scale,
            emb_shift,
            conv2,
            skip,
        })
    }

    fn attn(&mut self, name: &str, c: usize, cfa: Option<usize>) -> Result<AttnBlock> {
        Ok(AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c)?,
            q: self.linear(&format!("{name}.q"), c, c, 1.0),
            k: self.linear(&format!("{name}.k"), c, c, 1.0),
            v: self.linear(&format!("{name}.v"), c, c, 1.0),
            proj: self.linear(&format!("{name}.proj"), c, c, 0.5),
            cfa,
        })
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            specs: Vec::new(),
            groups: config.groupnorm_groups,
        };
        let e = config.embed_dim;
        let base = config.base_channels;
        let time1 = b.linear("time.fc1", e, e, 1.0);
        let time2 = b.linear("time.fc2", e, e, 1.0);
        let pose_table = b.add(
            "pose_embedding".into(),
            &[config.pose_count, e],
            Init::Normal { std: 1.0 },
        );
        let conv_in = b.conv("conv_in", config.in_channels, base, 3, 1, 1.0);

        let mut blocks = vec![Block::Save];
        let mut skips = vec![base];
        let mut ch = base;
        let mut res = config.image_size;
        let mut cfa = 0;
        let levels = config.levels();
        for (level, &mult) in config.channel_multipliers.iter().enumerate() {
            let out = base * mult;
            for r in 0..config.res_blocks_per_level {
                blocks.push(Block::Res(b.res(
                    &format!("down.{level}.res.{r}"),
                    ch,
                    out,
                    e,
                )?));
                ch = out;
                if config.attention_resolutions.contains(&res) {
                    blocks.push(Block::Attn(b.attn(
                        &format!("down.{level}.attn.{r}"),
                        ch,
                        None,
                    )?));
                }
                blocks.push(Block::Save);
                skips.push(ch);
            }
            if level + 1 < levels {
                blocks.push(Block::Down(b.conv(
                    &format!("down.{level}.downsample"),
                    ch,
                    ch,
                    3,
                    2,
                    1.0,
                )));
                res /= 2;
                blocks.push(Block::Save);
                skips.push(ch);
            }
        }

        blocks.push(Block::Res(b.res("mid.res.0", ch, ch, e)?));
        blocks.push(Block::Attn(b.attn("mid.attn", ch, Some(cfa))?));
        cfa += 1;
        blocks.push(Block::Res(b.res("mid.res.1", ch, ch, e)?));

        for (level, &mult) in config.channel_multipliers.iter().enumerate().rev() {
            let out = base * mult;
            for r in 0..=config.res_blocks_per_level {
                let skip = skips.pop().expect("one skip per decoder block");
                blocks.push(Block::Merge);
                blocks.push(Block::Res(b.res(
                    &format!("up.{level}.res.{r}"),
                    ch + skip,
                    out,
                    e,
                )?));
                ch = out;
                if config.attention_resolutions.contains(&res) {
                    blocks.push(Block::Attn(b.attn(
                        &format!("up.{level}.attn.{r}"),
                        ch,
                        Some(cfa),
                    )?));
                    cfa += 1;
                }
            }
            if level > 0 {
                blocks.push(Block::Up(b.conv(
                    &format!("up.{level}.upsample"),
                    ch,
                    ch,
                    3,
                    1,
                    1.0,
                )));
                res *= 2;
            }
        }
        debug_assert!(skips.is_empty());

        let out_norm = b.norm("out.norm", ch)?;
        let conv_out = b.conv("out.conv", ch, config.in_channels, 3, 1, 0.1);
        Ok(Self {
            config,
            specs: b.specs,
            time1,
            time2,
            pose_table,
            conv_in,
            blocks,
            out_norm,
            conv_out,
            cfa_layers: cfa,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Number of attention layers that honor [`AttnMode`].
    pub fn cfa_layers(&self) -> usize {
        self.cfa_layers
    }

    /// Index of the pose embedding table in the parameter list.
    pub fn pose_table_index(&self) -> usize {
        self.pose_table
    }

    pub fn init_params(&self, seed: u64) -> Result<Vec<Tensor<f32>>> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(match s.init {
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::Ones => Tensor::full(&s.shape, 1.0),
                    Init::Fan { fan_in, gain } => {
                        let std = (gain / (fan_in as f64).sqrt()) as f32;
                        seeded_normal::<f32>(&s.shape, derive_seed(seed, &[i as u64]))?.scale(std)
                    }
                    Init::Normal { std } => {
                        seeded_normal::<f32>(&s.shape, derive_seed(seed, &[i as u64]))?
                            .scale(std as f32)
                    }
                })
            })
            .collect()
    }

    /// Checks names and shapes of a parameter list against this network.
    pub fn check_params<T: Float>(&self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::shape(format!(
                "network has {} parameters, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (s, p) in self.specs.iter().zip(params) {
            if p.shape() != s.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    p.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    /// Predicts the noise in `x: [N, C, H, W]` at timesteps `t` for pose labels `poses`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        t: &[usize],
        poses: &[usize],
        mode: AttnMode<'_, T>,
    ) -> Result<UNetOutput<T>> {
        let c = &self.config;
        if params.len() != self.specs.len() {
            return Err(Error::shape(format!(
                "network has {} parameters, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != c.in_channels || xs[2] != c.image_size || xs[3] != c.image_size
        {
            return Err(Error::shape(format!(
                "input {xs:?} does not match [N, {}, {s}, {s}]",
                c.in_channels,
                s = c.image_size
            )));
        }
        let n = xs[0];
        if t.len() != n || poses.len() != n {
            return Err(Error::shape(format!(
                "batch of {n} with {} timesteps and {} pose labels",
                t.len(),
                poses.len()
            )));
        }
        if let Some(&p) = poses.iter().find(|&&p| p >= c.pose_count) {
            return Err(Error::invalid(format!(
                "pose label {p} out of range 0..{}",
                c.pose_count
            )));
        }
        if let AttnMode::Reference { kv, .. } = mode {
            if kv.len() != self.cfa_layers {
                return Err(Error::invalid(format!(
                    "reference keys/values cover {} layers, network has {}",
                    kv.len(),
                    self.cfa_layers
                )));
            }
        }

        let mut f = Forward {
            tape,
            params,
            groups: c.groupnorm_groups,
            mode,
            recorded: Vec::new(),
        };

        let sin = f.tape.constant(timestep_embedding(t, c.embed_dim)?);
        let h = f.linear(self.time1, sin)?;
        let h = f.tape.silu(h);
        let h = f.linear(self.time2, h)?;
        let pose = f.tape.gather_rows(params[self.pose_table], poses)?;
        let emb = f.tape.add(h, pose)?;
        let emb = f.tape.silu(emb);

        let mut h = f.conv(self.conv_in, x)?;
        let mut stack = Vec::new();
        for block in &self.blocks {
            h = match block {
                Block::Res(r) => f.res(r, h, emb)?,
                Block::Attn(a) => f.attn(a, h)?,
                Block::Down(conv) => f.conv(*conv, h)?,
                Block::Up(conv) => {
                    let u = f.tape.upsample2(h)?;
                    f.conv(*conv, u)?
                }
                Block::Save => {
                    stack.push(h);
                    h
                }
                Block::Merge => {
                    let s = stack.pop().expect("skip stack matches block list");
                    f.tape.concat_channels(&[h, s])?
                }
            };
        }
        let h = f.norm(self.out_norm, h)?;
        let h = f.tape.silu(h);
        let eps = f.conv(self.conv_out, h)?;
        Ok(UNetOutput {
            eps,
            kv: f.recorded,
        })
    }
}

/// Sinusoidal features `[sin(t·f_i), cos(t·f_i)]` with `f_i = 10000^(−i/half)`.
pub fn timestep_embedding<T: Float>(t: &[usize], dim: usize) -> Result<Tensor<T>> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        out.extend(args.iter().map(|a| T::from_f64(a.sin())));
        out.extend(args.iter().map(|a| T::from_f64(a.cos())));
    }
    Tensor::from_vec(&[t.len(), dim], out)
}

struct Forward<'a, 'm, T: Float> {
    tape: &'a mut Tape<T>,
    params: &'a [Var],
    groups: usize,
    mode: AttnMode<'m, T>,
    recorded: Vec<KvPair<T>>,
}

impl<T: Float> Forward<'_, '_, T> {
    fn conv(&mut self, c: Conv, x: Var) -> Result<Var> {
        self.tape
            .conv2d(x, self.params[c.w], Some(self.params[c.b]), c.stride, c.pad)
    }

    fn linear(&mut self, l: Linear, x: Var) -> Result<Var> {
        let y = self.tape.matmul(x, self.params[l.w])?;
        self.tape.add_last(y, self.params[l.b])
    }

    fn norm(&mut self, n: Norm, x: Var) -> Result<Var> {
        let y = self.tape.group_norm(x, self.groups)?;
        let y = self.tape.channel_mul(y, self.params[n.scale])?;
        self.tape.channel_add(y, self.params[n.shift])
    }

    fn res(&mut self, r: &ResBlock, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm(r.norm1, x)?;
        let h = self.tape.silu(h);
        let h = self.conv(r.conv1, h)?;
        // h ← norm(h)·(1 + scale) + shift, both heads driven by the embedding
        let scale = self.linear(r.emb_scale, emb)?;
        let scale = self.tape.add_scalar(scale, 1.0);
        let shift = self.linear(r.emb_shift, emb)?;
        let h = self.tape.group_norm(h, self.groups)?;
        let h = self.tape.channel_mul(h, scale)?;
        let h = self.tape.channel_add(h, shift)?;
        let h = self.tape.silu(h);
        let h = self.conv(r.conv2, h)?;
        let skip = match r.skip {
            Some(c) => self.conv(c, x)?,
            None => x,
        };
        self.tape.add(skip, h)
    }

    fn attn(&mut self, a: &AttnBlock, x: Var) -> Result<Var> {
        let shape = self.tape.value(x).shape().to_vec();
        let (n, c, tokens) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = self.norm(a.norm, x)?;
        let h = self.tape.reshape(h, &[n, c, tokens])?;
        let h = self.tape.transpose_last2(h)?;
        let q = self.linear(a.q, h)?;
        let k = self.linear(a.k, h)?;
        let v = self.linear(a.v, h)?;

        let (k, v, hard) = match (a.cfa, self.mode) {
            (Some(i), AttnMode::Reference { kv, hard }) => {
                let k = self.tape.constant(kv[i].k.clone());
                let v = self.tape.constant(kv[i].v.clone());
                (k, v, hard)
            }
            (Some(_), AttnMode::Record) => {
                self.recorded.push(KvPair {
                    k: self.tape.value(k).clone(),
                    v: self.tape.value(v).clone(),
                });
                (k, v, false)
            }
            _ => (k, v, false),
        };
        let out = attention(self.tape, q, k, v, hard)?;
        let out = self.linear(a.proj, out)?;
        let out = self.tape.transpose_last2(out)?;
        let out = self.tape.reshape(out, &shape)?;
        self.tape.add(x, out)
    }
}

/// `softmax(Q·Kᵀ/√d)·V`, or arg-max selection of `V` rows when `hard`.
///
/// `q: [B, n, d]`; `k`, `v`: `[1 or B, n', d]`.
pub fn attention<T: Float>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, hard: bool) -> Result<Var> {
    let d = *tape.value(q).shape().last().unwrap_or(&1);
    let logits = tape.bmm(q, k, false, true)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    if hard {
        tape.hard_attend(logits, v)
    } else {
        let w = tape.softmax_rows(logits)?;
        tape.bmm(w, v, false, false)
    }
}
