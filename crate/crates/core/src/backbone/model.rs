use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::archive::{AnyTensor, Archive};
use super::config::{EmbedSpec, MixerKind, Mode, ModelConfig, HEAD_DIM};
use crate::attention::{aa_tokens, build_relative_coords, mhsa_tokens, softplus_inverse, AggAttentionParams, CpbMlp, MhsaParams, Similarity, CPB_HIDDEN};
use crate::conv_glu::{conv_glu_tokens, hidden_dim, ConvGluParams};
use crate::error::{shape_err, Error, Result};
use crate::pfa::{build_geometry, PfaParams};
use crate::tensor::{conv2d, LayerNormParams, LinearParams, Scalar, Tensor};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;
/// Initial `softplus(τ)`.
pub const INIT_TEMPERATURE: f64 = 1.0 / 0.24;

#[derive(Clone, Copy, Debug)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
    Const(f64),
}

trait ParamSource {
    fn fetch<T: Scalar>(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor<T>>;
}

struct Seeded(ChaCha8Rng);

impl ParamSource for Seeded {
    fn fetch<T: Scalar>(&mut self, _name: &str, dims: &[usize], init: Init) -> Result<Tensor<T>> {
        let rng = &mut self.0;
        Tensor::from_fn(dims, |_| {
            T::from_f64(match init {
                Init::TruncNormal => loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z * INIT_STD;
                    }
                },
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
                Init::Const(v) => v,
            })
        })
    }
}

struct FromArchive(Archive);

impl ParamSource for FromArchive {
    fn fetch<T: Scalar>(&mut self, name: &str, dims: &[usize], _init: Init) -> Result<Tensor<T>> {
        let err = |reason: String| Error::ArchiveTensor { name: name.to_string(), reason };
        let t = self.0.remove(name).ok_or_else(|| err("missing from archive".into()))?;
        if t.dtype() != T::DTYPE {
            return Err(err(format!("stored as {}, model expects {}", t.dtype(), T::DTYPE)));
        }
        if t.dims() != dims {
            return Err(err(format!("extents {:?}, model expects {dims:?}", t.dims())));
        }
        Ok(t.to_typed())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed<T> {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: LayerNormParams<T>,
    pub spec: EmbedSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer<T> {
    Aggregated(AggAttentionParams<T>),
    Mhsa(MhsaParams<T>),
}

/// Pre-norm block: `x += proj(mixer(norm1(x)))`, then `x += glu(norm2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNormParams<T>,
    pub mixer: Mixer<T>,
    pub proj: LinearParams<T>,
    pub norm2: LayerNormParams<T>,
    pub mlp: ConvGluParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub embed: PatchEmbed<T>,
    pub blocks: Vec<Block<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub stages: Vec<Stage<T>>,
    pub norm: LayerNormParams<T>,
    pub head: LinearParams<T>,
}

fn linear<T: Scalar>(src: &mut impl ParamSource, name: &str, out: usize, inp: usize, init: Init) -> Result<LinearParams<T>> {
    let weight = src.fetch(&format!("{name}.weight"), &[out, inp], init)?;
    let bias = src.fetch(&format!("{name}.bias"), &[out], Init::Zeros)?;
    LinearParams::new(weight, Some(bias))
}

fn norm<T: Scalar>(src: &mut impl ParamSource, name: &str, c: usize) -> Result<LayerNormParams<T>> {
    Ok(LayerNormParams {
        gamma: src.fetch(&format!("{name}.weight"), &[c], Init::Ones)?,
        beta: src.fetch(&format!("{name}.bias"), &[c], Init::Zeros)?,
    })
}

fn build<T: Scalar>(config: &ModelConfig, src: &mut impl ParamSource) -> Result<Model<T>> {
    config.validate()?;
    let tn = Init::TruncNormal;
    let tau = Init::Const(softplus_inverse(INIT_TEMPERATURE));
    let mut stages = Vec::with_capacity(config.stages.len());
    let mut c_in = config.in_channels;
    for (s, sc) in config.stages.iter().enumerate() {
        let c = sc.channels;
        let heads = sc.heads();
        let spec = config.embed_spec(s);
        let p = format!("stages.{s}.patch_embed");
        let embed = PatchEmbed {
            weight: src.fetch(&format!("{p}.proj.weight"), &[c, c_in, spec.kernel, spec.kernel], tn)?,
            bias: src.fetch(&format!("{p}.proj.bias"), &[c], Init::Zeros)?,
            norm: norm(src, &format!("{p}.norm"), c)?,
            spec,
        };
        let mut blocks = Vec::with_capacity(sc.blocks);
        for b in 0..sc.blocks {
            let p = format!("stages.{s}.blocks.{b}");
            let a = format!("{p}.attn");
            let norm1 = norm(src, &format!("{p}.norm1"), c)?;
            let q_proj = linear(src, &format!("{a}.q"), c, c, tn)?;
            let k_proj = linear(src, &format!("{a}.k"), c, c, tn)?;
            let v_proj = linear(src, &format!("{a}.v"), c, c, tn)?;
            let mixer = match sc.mixer {
                MixerKind::Aggregated => {
                    let k = sc.window.expect("validated");
                    let pool_proj = linear(src, &format!("{a}.pool_proj"), c, c, tn)?;
                    let pool_norm = norm(src, &format!("{a}.pool_norm"), c)?;
                    let window_bias = src.fetch(&format!("{a}.window_bias"), &[heads, k * k], tn)?;
                    let qe = match config.query_embedding {
                        true => Some(src.fetch(&format!("{a}.query_embedding"), &[heads, HEAD_DIM], tn)?),
                        false => None,
                    };
                    let pos_tokens = match config.positional_tokens {
                        true => Some(src.fetch(&format!("{a}.pos_tokens"), &[heads, HEAD_DIM, k * k], tn)?),
                        false => None,
                    };
                    let tau_raw = src.fetch(&format!("{a}.tau"), &[heads], tau)?;
                    let cpb = CpbMlp {
                        fc1: linear(src, &format!("{a}.cpb.fc1"), CPB_HIDDEN, 2, tn)?,
                        fc2: linear(src, &format!("{a}.cpb.fc2"), heads, CPB_HIDDEN, Init::Zeros)?,
                    };
                    Mixer::Aggregated(AggAttentionParams {
                        pfa: PfaParams { q_proj, k_proj, v_proj, pool_proj, pool_norm, window_bias, heads, head_dim: HEAD_DIM },
                        qe,
                        pos_tokens,
                        tau_raw,
                        cpb,
                        similarity: Similarity::LengthScaledCosine,
                    })
                }
                MixerKind::Mhsa => {
                    let qe = match config.query_embedding {
                        true => Some(src.fetch(&format!("{a}.query_embedding"), &[heads, HEAD_DIM], tn)?),
                        false => None,
                    };
                    let tau_raw = src.fetch(&format!("{a}.tau"), &[heads], tau)?;
                    Mixer::Mhsa(MhsaParams { q_proj, k_proj, v_proj, qe, tau_raw, heads, head_dim: HEAD_DIM })
                }
            };
            let proj = linear(src, &format!("{a}.proj"), c, c, tn)?;
            let norm2 = norm(src, &format!("{p}.norm2"), c)?;
            let hid = hidden_dim(c, sc.mlp_ratio);
            let m = format!("{p}.mlp");
            let mlp = ConvGluParams {
                fc_value: linear(src, &format!("{m}.fc_value"), hid, c, tn)?,
                fc_gate: linear(src, &format!("{m}.fc_gate"), hid, c, tn)?,
                dw_weight: src.fetch(&format!("{m}.dwconv.weight"), &[hid, 3, 3], tn)?,
                dw_bias: src.fetch(&format!("{m}.dwconv.bias"), &[hid], Init::Zeros)?,
                fc_out: linear(src, &format!("{m}.fc_out"), c, hid, tn)?,
                variant: config.glu_variant,
            };
            blocks.push(Block { norm1, mixer, proj, norm2, mlp });
        }
        stages.push(Stage { embed, blocks });
        c_in = c;
    }
    let norm = norm(src, "norm", c_in)?;
    let head = linear(src, "head", config.num_classes, c_in, tn)?;
    Ok(Model { config: config.clone(), stages, norm, head })
}

fn visit_linear<'a, T>(f: &mut impl FnMut(String, &'a Tensor<T>), name: &str, p: &'a LinearParams<T>) {
    f(format!("{name}.weight"), &p.weight);
    if let Some(b) = &p.bias {
        f(format!("{name}.bias"), b);
    }
}

fn visit_norm<'a, T>(f: &mut impl FnMut(String, &'a Tensor<T>), name: &str, p: &'a LayerNormParams<T>) {
    f(format!("{name}.weight"), &p.gamma);
    f(format!("{name}.bias"), &p.beta);
}

/// Mean over tokens of `[N, C]`.
fn mean_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c] = x.dims() else {
        return Err(shape_err!("expected [N, C] tokens, got {:?}", x.dims()));
    };
    let mut acc = vec![0f64; c];
    for row in x.data().chunks_exact(c) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v.as_f64());
    }
    Tensor::new(vec![1, c], acc.into_iter().map(|a| T::from_f64(a / n as f64)).collect())
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized weights drawn from a seeded ChaCha8 stream.
    pub fn new_seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        build(config, &mut Seeded(crate::oracle::rng(seed)))
    }

    /// Every tensor named by the config must be present with matching
    /// dtype and extents, and nothing else may be.
    pub fn from_archive(config: &ModelConfig, archive: Archive) -> Result<Self> {
        let mut src = FromArchive(archive);
        let model = build(config, &mut src)?;
        if let Some(extra) = src.0.names().next() {
            return Err(Error::ArchiveTensor { name: extra.to_string(), reason: "not part of this model".into() });
        }
        Ok(model)
    }

    pub fn load(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(config, Archive::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Calls `f` once per parameter tensor with its archive name.
    pub fn for_each_param<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<T>)) {
        let f = &mut f;
        for (s, stage) in self.stages.iter().enumerate() {
            let p = format!("stages.{s}.patch_embed");
            f(format!("{p}.proj.weight"), &stage.embed.weight);
            f(format!("{p}.proj.bias"), &stage.embed.bias);
            visit_norm(f, &format!("{p}.norm"), &stage.embed.norm);
            for (b, block) in stage.blocks.iter().enumerate() {
                let p = format!("stages.{s}.blocks.{b}");
                let a = format!("{p}.attn");
                visit_norm(f, &format!("{p}.norm1"), &block.norm1);
                let (q, k, v, qe, tau) = match &block.mixer {
                    Mixer::Aggregated(m) => (&m.pfa.q_proj, &m.pfa.k_proj, &m.pfa.v_proj, &m.qe, &m.tau_raw),
                    Mixer::Mhsa(m) => (&m.q_proj, &m.k_proj, &m.v_proj, &m.qe, &m.tau_raw),
                };
                visit_linear(f, &format!("{a}.q"), q);
                visit_linear(f, &format!("{a}.k"), k);
                visit_linear(f, &format!("{a}.v"), v);
                if let Mixer::Aggregated(m) = &block.mixer {
                    visit_linear(f, &format!("{a}.pool_proj"), &m.pfa.pool_proj);
                    visit_norm(f, &format!("{a}.pool_norm"), &m.pfa.pool_norm);
                    f(format!("{a}.window_bias"), &m.pfa.window_bias);
                }
                if let Some(qe) = qe {
                    f(format!("{a}.query_embedding"), qe);
                }
                if let Mixer::Aggregated(m) = &block.mixer {
                    if let Some(t) = &m.pos_tokens {
                        f(format!("{a}.pos_tokens"), t);
                    }
                }
                f(format!("{a}.tau"), tau);
                if let Mixer::Aggregated(m) = &block.mixer {
                    visit_linear(f, &format!("{a}.cpb.fc1"), &m.cpb.fc1);
                    visit_linear(f, &format!("{a}.cpb.fc2"), &m.cpb.fc2);
                }
                visit_linear(f, &format!("{a}.proj"), &block.proj);
                visit_norm(f, &format!("{p}.norm2"), &block.norm2);
                let m = format!("{p}.mlp");
                visit_linear(f, &format!("{m}.fc_value"), &block.mlp.fc_value);
                visit_linear(f, &format!("{m}.fc_gate"), &block.mlp.fc_gate);
                f(format!("{m}.dwconv.weight"), &block.mlp.dw_weight);
                f(format!("{m}.dwconv.bias"), &block.mlp.dw_bias);
                visit_linear(f, &format!("{m}.fc_out"), &block.mlp.fc_out);
            }
        }
        visit_norm(f, "norm", &self.norm);
        visit_linear(f, "head", &self.head);
    }

    pub fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.for_each_param(|_, t| n += t.len() as u64);
        n
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.for_each_param(|name, t| {
            a.insert(name, AnyTensor::from_typed(t));
        });
        a
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let stages = self
            .stages
            .iter()
            .map(|s| Stage {
                embed: PatchEmbed {
                    weight: s.embed.weight.cast(),
                    bias: s.embed.bias.cast(),
                    norm: s.embed.norm.cast(),
                    spec: s.embed.spec,
                },
                blocks: s
                    .blocks
                    .iter()
                    .map(|b| Block {
                        norm1: b.norm1.cast(),
                        mixer: match &b.mixer {
                            Mixer::Aggregated(m) => Mixer::Aggregated(m.cast()),
                            Mixer::Mhsa(m) => Mixer::Mhsa(m.cast()),
                        },
                        proj: b.proj.cast(),
                        norm2: b.norm2.cast(),
                        mlp: b.mlp.cast(),
                    })
                    .collect(),
            })
            .collect();
        Model { config: self.config.clone(), stages, norm: self.norm.cast(), head: self.head.cast() }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let (c, h, w) = image.chw()?;
        let stride = self.config.total_stride();
        if c != self.config.in_channels {
            return Err(shape_err!("image has {c} channels, model expects {}", self.config.in_channels));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(shape_err!(
                "image {h}x{w} is not a multiple of {stride}; resize or pad it (for example to 224x224)"
            ));
        }
        Ok((h, w))
    }

    /// Runs stages `0..=last` and returns the tokens `[h·w, C]` with `(h, w)`.
    fn run_stages(&self, image: &Tensor<T>, mode: Mode, last: usize) -> Result<(Tensor<T>, usize, usize)> {
        let (in_h, in_w) = self.check_image(image)?;
        let mut chw = image.clone();
        let mut out = None;
        for (s, stage) in self.stages.iter().enumerate().take(last + 1) {
            let e = &stage.embed;
            let y = conv2d(&chw, &e.weight, Some(&e.bias), e.spec.stride, e.spec.pad)?;
            let (_, h, w) = y.chw()?;
            let mut x = e.norm.forward(&y.chw_to_tokens()?)?;
            let ctx = match self.config.pool_extent(s, in_h, in_w, h, w, mode) {
                Some((ph, pw)) => {
                    let k = self.config.stages[s].window.expect("validated");
                    let train = self.config.train_extent(s);
                    Some((build_geometry(h, w, k, ph, pw)?, build_relative_coords(h, w, ph, pw, train, train)?))
                }
                None => None,
            };
            for block in &stage.blocks {
                let y = block.norm1.forward(&x)?;
                let mixed = match (&block.mixer, &ctx) {
                    (Mixer::Aggregated(p), Some((geom, coords))) => aa_tokens(&y, p, geom, coords)?,
                    (Mixer::Mhsa(p), _) => mhsa_tokens(&y, p)?,
                    (Mixer::Aggregated(_), None) => return Err(shape_err!("stage {} lacks a pooled grid", s + 1)),
                };
                x = x.add(&block.proj.forward(&mixed)?)?;
                let y = block.norm2.forward(&x)?;
                x = x.add(&conv_glu_tokens(&y, h, w, &block.mlp)?)?;
            }
            chw = crate::tensor::tokens_to_chw(&x, h, w)?;
            out = Some((x, h, w));
        }
        out.ok_or_else(|| shape_err!("model has no stages"))
    }

    /// Class logits `[num_classes]` for one `[C, H, W]` image.
    pub fn forward(&self, image: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (x, _, _) = self.run_stages(image, mode, self.stages.len() - 1)?;
        let pooled = mean_tokens(&self.norm.forward(&x)?)?;
        let logits = self.head.forward(&pooled)?;
        logits.reshape(&[self.config.num_classes])
    }

    /// Logits `[B, num_classes]` for `[B, C, H, W]` images.
    pub fn forward_batch(&self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let &[b, c, h, w] = images.dims() else {
            return Err(shape_err!("batch must be [B, C, H, W], got {:?}", images.dims()));
        };
        let per = c * h * w;
        let mut out = Vec::with_capacity(b * self.config.num_classes);
        for img in images.data().chunks_exact(per) {
            let img = Tensor::new(vec![c, h, w], img.to_vec())?;
            out.extend_from_slice(self.forward(&img, mode)?.data());
        }
        Tensor::new(vec![b, self.config.num_classes], out)
    }

    /// Feature map `[C, h, w]` after stage `stage` (0-based).
    pub fn stage_features(&self, image: &Tensor<T>, mode: Mode, stage: usize) -> Result<Tensor<T>> {
        if stage >= self.stages.len() {
            return Err(shape_err!("stage {} out of range (model has {})", stage + 1, self.stages.len()));
        }
        let (x, h, w) = self.run_stages(image, mode, stage)?;
        crate::tensor::tokens_to_chw(&x, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::config::{PoolMode, StageConfig};
    use crate::oracle::{rand_tensor, rng};

    /// Two small stages: aggregated attention then global attention.
    pub(crate) fn toy_config() -> ModelConfig {
        let stage = |c, mixer| StageConfig {
            channels: c,
            blocks: 1,
            mlp_ratio: 2,
            mixer,
            window: (mixer == MixerKind::Aggregated).then_some(3),
            pool_mode: (mixer == MixerKind::Aggregated).then_some(PoolMode::Ratio),
            pool: (mixer == MixerKind::Aggregated).then_some(7),
        };
        let mut cfg = ModelConfig::from_stages(vec![stage(24, MixerKind::Aggregated), stage(48, MixerKind::Mhsa)]);
        cfg.num_classes = 5;
        cfg
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let cfg = toy_config();
        let a = Model::<f32>::new_seeded(&cfg, 7).unwrap();
        let b = Model::<f32>::new_seeded(&cfg, 7).unwrap();
        let c = Model::<f32>::new_seeded(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.stages[0].blocks[0].mlp.fc_value.weight.data();
        assert!(w.iter().all(|v| v.abs() <= 2.0 * INIT_STD as f32));
    }

    #[test]
    fn archive_roundtrip_and_diagnostics() {
        let cfg = toy_config();
        let m = Model::<f32>::new_seeded(&cfg, 1).unwrap();
        let arch = m.to_archive();
        assert_eq!(arch.len(), {
            let mut n = 0;
            m.for_each_param(|_, _| n += 1);
            n
        });
        assert_eq!(Model::from_archive(&cfg, arch.clone()).unwrap(), m);

        let mut missing = arch.clone();
        missing.remove("stages.0.blocks.0.attn.tau");
        match Model::<f32>::from_archive(&cfg, missing) {
            Err(Error::ArchiveTensor { name, .. }) => assert_eq!(name, "stages.0.blocks.0.attn.tau"),
            other => panic!("{other:?}"),
        }
        let mut extra = arch.clone();
        extra.insert("zzz", AnyTensor::F32(Tensor::zeros(&[1]).unwrap()));
        assert!(matches!(Model::<f32>::from_archive(&cfg, extra), Err(Error::ArchiveTensor { name, .. }) if name == "zzz"));
        let mut wrong = arch.clone();
        wrong.insert("head.bias", AnyTensor::F32(Tensor::zeros(&[6]).unwrap()));
        assert!(matches!(Model::<f32>::from_archive(&cfg, wrong), Err(Error::ArchiveTensor { name, .. }) if name == "head.bias"));
        assert!(Model::<f64>::from_archive(&cfg, arch).is_err());
    }

    #[test]
    fn forward_shapes_and_errors() {
        let cfg = toy_config();
        let m = Model::<f64>::new_seeded(&cfg, 3).unwrap();
        let img = rand_tensor(&mut rng(0), &[3, 16, 24]);
        let y = m.forward(&img, Mode::Normal).unwrap();
        assert_eq!(y.dims(), [5]);
        assert!(y.all_finite());
        assert_eq!(m.stage_features(&img, Mode::Normal, 0).unwrap().dims(), [24, 4, 6]);
        let bad = rand_tensor(&mut rng(0), &[3, 20, 24]);
        assert!(matches!(m.forward(&bad, Mode::Normal), Err(Error::Shape(msg)) if msg.contains("multiple of 8")));
        let batch = Tensor::new(vec![2, 3, 16, 24], [img.data(), img.data()].concat()).unwrap();
        let yb = m.forward_batch(&batch, Mode::Linear).unwrap();
        assert_eq!(yb.dims(), [2, 5]);
        assert_eq!(&yb.data()[..5], &yb.data()[5..]);
    }

    #[test]
    fn f32_tracks_f64() {
        let cfg = toy_config();
        let m = Model::<f64>::new_seeded(&cfg, 9).unwrap();
        let img = rand_tensor(&mut rng(2), &[3, 16, 16]);
        let y64 = m.forward(&img, Mode::Normal).unwrap();
        let y32 = m.cast::<f32>().forward(&img.cast(), Mode::Normal).unwrap();
        assert!(y32.cast::<f64>().max_abs_diff(&y64).unwrap() < 1e-4);
    }
}
