//! A small multiview transformer: per-view patch encoder, a shared decoder
//! alternating frame and global attention, and task heads for dense depth and
//! confidence, camera pose and focal length.
//!
//! Every query/key/value and feed-forward map of the decoder carries a LoRA
//! adapter `x ↦ x W + b + (x A) B / rank`. With `B = 0` the adapted model is
//! exactly the base model.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tco_autodiff::{concat, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::predictions::{PredictionVars, Predictions, ViewVars};
use crate::splat::CameraVars;

pub const DEPTH_FLOOR: f64 = 1e-3;
const LN_EPS: f64 = 1e-5;
const ADAPTED: [&str; 3] = ["qkv", "ffn1", "ffn2"];
const KINDS: [&str; 2] = ["frame", "global"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    /// Number of decoder blocks; each holds a frame and a global attention layer.
    pub blocks: usize,
    pub ffn_mult: usize,
    pub lora_rank: usize,
    pub max_views: usize,
    /// Focal length (pixels) predicted for a zero focal-head output.
    pub focal_ref: f64,
    /// Initial bias of the raw depth channel.
    pub depth_bias: f64,
    /// Initial bias of the raw confidence channel.
    pub confidence_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            dim: 32,
            heads: 4,
            blocks: 2,
            ffn_mult: 2,
            lora_rank: 4,
            max_views: 8,
            focal_ref: 32.0,
            depth_bias: 4.0,
            confidence_bias: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lora_rank == 0 {
            return bad("LoRA rank must be at least 1".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image size {} is not a multiple of patch {}", self.image_size, self.patch));
        }
        if self.max_views < 2 || self.blocks == 0 || self.ffn_mult == 0 {
            return bad("max_views >= 2, blocks >= 1 and ffn_mult >= 1 are required".into());
        }
        if !(self.focal_ref > 0.0) {
            return bad(format!("focal_ref must be positive, got {}", self.focal_ref));
        }
        Ok(())
    }

    pub fn tokens_per_view(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    fn hidden(&self) -> usize {
        self.dim * self.ffn_mult
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    Encoder,
    Decoder,
    Lora,
    DepthHead,
    CameraHead,
}

pub fn role_of(name: &str) -> ParamRole {
    if name.starts_with("lora.") {
        ParamRole::Lora
    } else if name.starts_with("dec.") {
        ParamRole::Decoder
    } else if name.starts_with("head.dense") {
        ParamRole::DepthHead
    } else if name.starts_with("head.") {
        ParamRole::CameraHead
    } else {
        ParamRole::Encoder
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub encoder: bool,
    pub decoder: bool,
    pub lora: bool,
    pub depth_head: bool,
    pub camera_head: bool,
}

impl Trainable {
    /// Test-time default: only the decoder adapters.
    pub fn lora_only() -> Self {
        Self {
            encoder: false,
            decoder: false,
            lora: true,
            depth_head: false,
            camera_head: false,
        }
    }

    /// Supervised pretraining of every base weight; adapters stay untouched.
    pub fn base() -> Self {
        Self {
            encoder: true,
            decoder: true,
            lora: false,
            depth_head: true,
            camera_head: true,
        }
    }

    pub fn none() -> Self {
        Self {
            encoder: false,
            decoder: false,
            lora: false,
            depth_head: false,
            camera_head: false,
        }
    }

    pub fn with_heads(mut self, depth_head: bool, camera_head: bool) -> Self {
        self.depth_head |= depth_head;
        self.camera_head |= camera_head;
        self
    }

    pub fn contains(&self, role: ParamRole) -> bool {
        match role {
            ParamRole::Encoder => self.encoder,
            ParamRole::Decoder => self.decoder,
            ParamRole::Lora => self.lora,
            ParamRole::DepthHead => self.depth_head,
            ParamRole::CameraHead => self.camera_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyMvt {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// Output of [`ToyMvt::forward`]: predictions on the tape plus the trainable
/// leaves in parameter-name order.
pub struct Forward<'t> {
    pub predictions: PredictionVars<'t>,
    pub leaves: Vec<(String, Var<'t>)>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl ToyMvt {
    /// Random base weights; adapters start at `B = 0`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let h = config.hidden();
        let t = config.tokens_per_view();
        let pd = config.patch_dim();
        let mut p = BTreeMap::new();
        let lin = |p: &mut BTreeMap<String, Tensor>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            p.insert(format!("{name}.w"), normal_tensor(rng, &[i, o], 1.0 / (i as f64).sqrt()));
            p.insert(format!("{name}.b"), Tensor::zeros(vec![o]));
        };
        lin(&mut p, &mut rng, "enc.patch", pd, d);
        p.insert("enc.pos".into(), normal_tensor(&mut rng, &[t, d], 0.1));
        p.insert("enc.ref".into(), normal_tensor(&mut rng, &[d], 0.5));
        lin(&mut p, &mut rng, "enc.mlp1", d, h);
        lin(&mut p, &mut rng, "enc.mlp2", h, d);
        for b in 0..config.blocks {
            for kind in KINDS {
                let pre = format!("dec.{b}.{kind}");
                lin(&mut p, &mut rng, &format!("{pre}.qkv"), d, 3 * d);
                lin(&mut p, &mut rng, &format!("{pre}.proj"), d, d);
                lin(&mut p, &mut rng, &format!("{pre}.ffn1"), d, h);
                lin(&mut p, &mut rng, &format!("{pre}.ffn2"), h, d);
            }
        }
        let pp = config.patch * config.patch;
        lin(&mut p, &mut rng, "head.dense", d, pp * 2);
        // small dense weights and biased channels give sane untrained outputs
        let dense_w = p.get_mut("head.dense.w").expect("dense");
        *dense_w = dense_w.map(|v| v * 0.1);
        let mut bias = vec![0.0; pp * 2];
        for px in 0..pp {
            bias[px * 2] = config.depth_bias;
            bias[px * 2 + 1] = config.confidence_bias;
        }
        p.insert("head.dense.b".into(), Tensor::vector(bias));
        lin(&mut p, &mut rng, "head.cam.l1", d, d);
        lin(&mut p, &mut rng, "head.cam.l2", d, 7);
        lin(&mut p, &mut rng, "head.focal.l1", d, d);
        lin(&mut p, &mut rng, "head.focal.l2", d, 2);
        for name in ["head.cam.l2.w", "head.focal.l2.w"] {
            let w = p.get_mut(name).expect("head");
            *w = w.map(|v| v * 0.1);
        }
        let mut model = Self { config, params: p };
        model.reset_lora(seed ^ LORA_SEED_SALT);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Names of the decoder maps that carry adapters.
    pub fn adapted_maps(&self) -> Vec<String> {
        (0..self.config.blocks)
            .flat_map(|b| KINDS.iter().flat_map(move |k| ADAPTED.iter().map(move |m| format!("{b}.{k}.{m}"))))
            .collect()
    }

    /// Re-initialize adapters: `A` random, `B` zero.
    pub fn reset_lora(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.config.lora_rank;
        for map in self.adapted_maps() {
            let w = &self.params[&format!("dec.{map}.w")];
            let (i, o) = (w.shape()[0], w.shape()[1]);
            self.params
                .insert(format!("lora.{map}.a"), normal_tensor(&mut rng, &[i, r], 1.0 / (i as f64).sqrt()));
            self.params.insert(format!("lora.{map}.b"), Tensor::zeros(vec![r, o]));
        }
    }

    /// Change the adapter rank, re-initializing every adapter.
    pub fn with_lora_rank(mut self, rank: usize, seed: u64) -> Result<Self> {
        self.config.lora_rank = rank;
        self.config.validate()?;
        self.params.retain(|k, _| role_of(k) != ParamRole::Lora);
        self.reset_lora(seed);
        Ok(self)
    }

    /// The base network alone: adapters are dropped and the decoder runs
    /// its frozen maps only. A checkpoint of it will not load.
    pub fn without_adapters(&self) -> Self {
        let mut m = self.clone();
        m.params.retain(|k, _| role_of(k) != ParamRole::Lora);
        m
    }

    /// Names of parameters selected by `t`, in sorted order.
    pub fn trainable_parameters(&self, t: &Trainable) -> Vec<String> {
        self.params.keys().filter(|k| t.contains(role_of(k))).cloned().collect()
    }

    /// FNV-1a hash over every parameter not selected by `t`.
    pub fn frozen_hash(&self, t: &Trainable) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, v) in &self.params {
            if t.contains(role_of(k)) {
                continue;
            }
            eat(k.as_bytes());
            for x in v.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Add seeded low-rank noise to every adapted decoder weight, with
    /// Frobenius norm `strength` times that of the weight.
    pub fn perturb_decoder(&mut self, strength: f64, rank: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for map in self.adapted_maps() {
            let name = format!("dec.{map}.w");
            let w = self.params[&name].clone();
            let (i, o) = (w.shape()[0], w.shape()[1]);
            let u = normal_tensor(&mut rng, &[i, rank.max(1)], 1.0);
            let v = normal_tensor(&mut rng, &[rank.max(1), o], 1.0);
            let mut delta = vec![0.0; i * o];
            for a in 0..i {
                for r in 0..rank.max(1) {
                    let ua = u.data()[a * rank.max(1) + r];
                    for b in 0..o {
                        delta[a * o + b] += ua * v.data()[r * o + b];
                    }
                }
            }
            let dn = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
            let wn = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = if dn > 0.0 { strength * wn / dn } else { 0.0 };
            let perturbed = w.data().iter().zip(&delta).map(|(a, b)| a + s * b).collect();
            self.params.insert(name, Tensor::new(vec![i, o], perturbed).expect("shape"));
        }
    }

    fn check_images(&self, images: &[Tensor]) -> Result<()> {
        let n = images.len();
        if n < 2 {
            return Err(Error::TooFewViews { required: 2, got: n });
        }
        if n > self.config.max_views {
            return Err(Error::Config(format!("{n} views exceed max_views {}", self.config.max_views)));
        }
        let s = self.config.image_size;
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [s, s, 3] {
                return Err(Error::Shape(format!("image {i} has shape {:?}, expected [{s}, {s}, 3]", img.shape())));
            }
        }
        Ok(())
    }

    fn patchify(&self, images: &[Tensor]) -> Tensor {
        let s = self.config.image_size;
        let p = self.config.patch;
        let g = s / p;
        let mut out = Vec::with_capacity(images.len() * s * s * 3);
        for img in images {
            let d = img.data();
            for gy in 0..g {
                for gx in 0..g {
                    for y in 0..p {
                        for x in 0..p {
                            let i = ((gy * p + y) * s + gx * p + x) * 3;
                            out.extend_from_slice(&d[i..i + 3]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![images.len() * g * g, p * p * 3], out).expect("patches")
    }

    /// Differentiable forward pass over all views.
    pub fn forward<'t>(&self, tape: &'t Tape, images: &[Tensor], trainable: &Trainable) -> Result<Forward<'t>> {
        self.check_images(images)?;
        let mut vars = BTreeMap::new();
        let mut leaves = Vec::new();
        for (k, v) in &self.params {
            let var = if trainable.contains(role_of(k)) {
                let l = tape.leaf(v.clone());
                leaves.push((k.clone(), l));
                l
            } else {
                tape.constant(v.clone())
            };
            vars.insert(k.as_str(), var);
        }
        let net = Net { cfg: &self.config, vars: &vars, n: images.len() };
        let predictions = net.run(tape, self.patchify(images))?;
        Ok(Forward { predictions, leaves })
    }

    /// Value-level predictions.
    pub fn predict(&self, images: &[Tensor]) -> Result<Predictions> {
        let tape = Tape::new();
        self.forward(&tape, images, &Trainable::none())?.predictions.values()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Checkpoint layout (little-endian): `b"TCOM"`, u32 version, u64 length
    /// and UTF-8 JSON of the config, u64 tensor count, then per tensor a u32
    /// name length, the name, a u32 rank, u64 extents and f64 values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u64(r)? as usize;
        let cfg = read_bytes(r, len)?;
        let config: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        config.validate()?;
        let count = read_u64(r)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, nlen)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(r, n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        let model = Self { config, params };
        model.check_complete()?;
        Ok(model)
    }

    fn check_complete(&self) -> Result<()> {
        let reference = Self::new(self.config.clone(), 0)?;
        for (k, v) in &reference.params {
            match self.params.get(k) {
                Some(t) if t.shape() == v.shape() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {k} has shape {:?}, expected {:?}",
                        t.shape(),
                        v.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {k}"))),
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCOM";
pub const CHECKPOINT_VERSION: u32 = 1;

const LORA_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

struct Net<'a, 't> {
    cfg: &'a ModelConfig,
    vars: &'a BTreeMap<&'a str, Var<'t>>,
    n: usize,
}

impl<'t> Net<'_, 't> {
    fn p(&self, name: &str) -> Var<'t> {
        self.vars[name]
    }

    fn linear(&self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        Ok(x.matmul(self.p(&format!("{name}.w")))?.add(self.p(&format!("{name}.b")))?)
    }

    fn adapted(&self, x: Var<'t>, map: &str) -> Result<Var<'t>> {
        let base = self.linear(x, &format!("dec.{map}"))?;
        let (Some(&a), Some(&b)) = (self.vars.get(format!("lora.{map}.a").as_str()), self.vars.get(format!("lora.{map}.b").as_str()))
        else {
            return Ok(base);
        };
        let delta = x.matmul(a)?.matmul(b)?.scale(1.0 / self.cfg.lora_rank as f64);
        Ok(base.add(delta)?)
    }

    fn attention(&self, x: Var<'t>, block: usize, kind: &str) -> Result<Var<'t>> {
        let (n, t, d, h) = (self.n, self.cfg.tokens_per_view(), self.cfg.dim, self.cfg.heads);
        let dh = d / h;
        let qkv = self.adapted(x.layer_norm(LN_EPS)?, &format!("{block}.{kind}.qkv"))?;
        // frame attention groups tokens per view, global attention over all
        let (groups, len) = if kind == "frame" { (n, t) } else { (1, n * t) };
        let split = |i: usize| -> Result<Var<'t>> {
            Ok(qkv
                .slice(1, i * d, (i + 1) * d)?
                .reshape(&[groups, len, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[groups * h, len, dh])?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt()).softmax()?;
        let out = scores
            .matmul(v)?
            .reshape(&[groups, h, len, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * t, d])?;
        let x = x.add(self.linear(out, &format!("dec.{block}.{kind}.proj"))?)?;
        let hdn = self.adapted(x.layer_norm(LN_EPS)?, &format!("{block}.{kind}.ffn1"))?.gelu();
        Ok(x.add(self.adapted(hdn, &format!("{block}.{kind}.ffn2"))?)?)
    }

    fn mlp_head(&self, pooled: Var<'t>, name: &str) -> Result<Var<'t>> {
        let h = self.linear(pooled, &format!("{name}.l1"))?.gelu();
        self.linear(h, &format!("{name}.l2"))
    }

    fn run(&self, tape: &'t Tape, patches: Tensor) -> Result<PredictionVars<'t>> {
        let cfg = self.cfg;
        let (n, t, d) = (self.n, cfg.tokens_per_view(), cfg.dim);
        let x = self.linear(tape.constant(patches), "enc.patch")?;
        let x = x.reshape(&[n, t, d])?.add(self.p("enc.pos"))?;
        let mut first = vec![0.0; n];
        first[0] = 1.0;
        let refmask = tape.constant(Tensor::new(vec![n, 1, 1], first)?);
        let x = x.add(refmask.mul(self.p("enc.ref"))?)?.reshape(&[n * t, d])?;
        let h = self.linear(x.layer_norm(LN_EPS)?, "enc.mlp1")?.gelu();
        let mut x = x.add(self.linear(h, "enc.mlp2")?)?;

        for b in 0..cfg.blocks {
            for kind in KINDS {
                x = self.attention(x, b, kind)?;
            }
        }
        let x = x.layer_norm(LN_EPS)?;

        // dense head: per token, P x P pixels of (depth, confidence)
        let (s, p) = (cfg.image_size, cfg.patch);
        let g = s / p;
        let dense = self
            .linear(x, "head.dense")?
            .reshape(&[n, g, g, p, p, 2])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n, s, s, 2])?;
        let depth = dense.slice(3, 0, 1)?.softplus().add_scalar(DEPTH_FLOOR);
        let conf = dense.slice(3, 1, 2)?.exp().add_scalar(1.0);

        let pooled = x.reshape(&[n, t, d])?.mean_axis(1, false)?;
        let cam = self.mlp_head(pooled, "head.cam")?;
        let focal = self.mlp_head(pooled, "head.focal")?.exp().scale(cfg.focal_ref);
        let unit = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]));
        let quat = cam.slice(1, 0, 4)?.add(unit)?.normalize()?;
        let rot = quat_to_matrix(quat)?;
        let trans = cam.slice(1, 4, 7)?;

        let identity = tape.constant(crate::geometry::Pose::identity().rotation_tensor());
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let mut views = Vec::with_capacity(n);
        for i in 0..n {
            let (rotation, translation) = if i == 0 {
                (identity, zero)
            } else {
                (rot.slice(0, i, i + 1)?.reshape(&[3, 3])?, trans.slice(0, i, i + 1)?.reshape(&[3])?)
            };
            views.push(ViewVars {
                depth: depth.slice(0, i, i + 1)?.reshape(&[s, s])?,
                confidence: conf.slice(0, i, i + 1)?.reshape(&[s, s])?,
                camera: CameraVars {
                    rotation,
                    translation,
                    focal: focal.slice(0, i, i + 1)?.reshape(&[2])?,
                    width: s,
                    height: s,
                },
            });
        }
        Ok(PredictionVars { views })
    }
}

/// Rotation matrices `[N, 3, 3]` from unit quaternions `[N, 4]` (scalar first).
pub fn quat_to_matrix<'t>(q: Var<'t>) -> Result<Var<'t>> {
    let n = q.shape()[0];
    let c = |i: usize| q.slice(1, i, i + 1);
    let (w, x, y, z) = (c(0)?, c(1)?, c(2)?, c(3)?);
    let two = |a: Var<'t>, b: Var<'t>| -> Result<Var<'t>> { Ok(a.mul(b)?.scale(2.0)) };
    let one_minus = |a: Var<'t>, b: Var<'t>| -> Result<Var<'t>> {
        Ok(a.square().add(b.square())?.scale(-2.0).add_scalar(1.0))
    };
    let entries = [
        one_minus(y, z)?,
        two(x, y)?.sub(two(w, z)?)?,
        two(x, z)?.add(two(w, y)?)?,
        two(x, y)?.add(two(w, z)?)?,
        one_minus(x, z)?,
        two(y, z)?.sub(two(w, x)?)?,
        two(x, z)?.sub(two(w, y)?)?,
        two(y, z)?.add(two(w, x)?)?,
        one_minus(x, y)?,
    ];
    Ok(concat(&entries, 1)?.reshape(&[n, 3, 3])?)
}

/// Ground truth for one training scene. Poses are relative to view 0.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub images: Vec<Tensor>,
    pub depths: Vec<Tensor>,
    pub poses: Vec<crate::geometry::Pose>,
    pub intrinsics: Vec<crate::geometry::Intrinsics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub depth_weight: f64,
    pub rotation_weight: f64,
    pub translation_weight: f64,
    pub focal_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 2e-3,
            seed: 0,
            depth_weight: 1.0,
            rotation_weight: 1.0,
            translation_weight: 0.5,
            focal_weight: 1.0,
        }
    }
}

/// Supervised loss of one scene: relative depth ℓ1, rotation geodesic,
/// translation ℓ1 and relative focal ℓ1, averaged over views.
pub fn supervised_loss<'t>(preds: &PredictionVars<'t>, sample: &SceneSample, cfg: &PretrainConfig) -> Result<Var<'t>> {
    let tape = preds.views[0].depth.tape();
    let n = preds.len() as f64;
    let mut total = tape.scalar(0.0);
    for (i, v) in preds.views.iter().enumerate() {
        // pixels without ground truth carry depth 0 and are skipped
        let gt = &sample.depths[i];
        let valid = gt.map(|d| if d > 0.0 { 1.0 } else { 0.0 });
        let count = valid.sum();
        if count > 0.0 {
            let safe = tape.constant(gt.map(|d| if d > 0.0 { d } else { 1.0 }));
            let rel = v
                .depth
                .sub(safe)?
                .div(safe)?
                .abs()
                .mul(tape.constant(valid))?
                .sum();
            total = total.add(rel.scale(cfg.depth_weight / (n * count)))?;
        }
        let k = &sample.intrinsics[i];
        let f = tape.constant(k.focal_tensor());
        let fl = v.camera.focal.sub(f)?.div(f)?.abs().sum();
        total = total.add(fl.scale(cfg.focal_weight / n))?;
        if i > 0 {
            let pose = &sample.poses[i];
            let r = crate::priors::g_rot(v.camera.rotation, tape.constant(pose.rotation_tensor()))?;
            let t = v
                .camera
                .translation
                .sub(tape.constant(pose.translation_tensor()))?
                .abs()
                .sum();
            total = total.add(r.scale(cfg.rotation_weight / n))?;
            total = total.add(t.scale(cfg.translation_weight / n))?;
        }
    }
    Ok(total)
}

/// Train the base weights on scenes drawn from `generator(step)`.
/// Returns the per-step loss.
pub fn pretrain<G>(model: &mut ToyMvt, mut generator: G, cfg: &PretrainConfig) -> Result<Vec<f64>>
where
    G: FnMut(u64) -> Result<SceneSample>,
{
    let trainable = Trainable::base();
    let names = model.trainable_parameters(&trainable);
    let mut adam = crate::optim::Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for step in 0..cfg.steps {
        let sample = generator(rng.random())?;
        let tape = Tape::new();
        let fwd = model.forward(&tape, &sample.images, &trainable)?;
        let loss = supervised_loss(&fwd.predictions, &sample, cfg)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, seed: cfg.seed });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = fwd.leaves.iter().map(|(_, v)| grads.get(*v)).collect();
        let mut params: Vec<Tensor> = names.iter().map(|k| model.params[k].clone()).collect();
        adam.step(&mut params, &g)?;
        for (k, p) in names.iter().zip(params) {
            model.params.insert(k.clone(), p);
        }
        history.push(value);
    }
    Ok(history)
}
