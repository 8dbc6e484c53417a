use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::conv_glu::GluVariant;
use crate::error::{config_err, Error, Result};

/// Channel width of one attention head in every stock variant.
pub const HEAD_DIM: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerKind {
    /// Aggregated attention over a sliding window plus a pooled map.
    Aggregated,
    /// Global multi-head self-attention.
    Mhsa,
}

/// How the pooled grid of an aggregated-attention stage is sized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    /// Follows the inference mode: proportional to the input in normal
    /// mode, the configured extent in linear mode.
    Ratio,
    /// Always the configured extent.
    Fixed,
}

/// Inference mode of the whole model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    /// Pooled grids scale with the input (`input/32` for the stock pool of 7).
    #[default]
    Normal,
    /// Pooled grids stay at their configured extent; cost is linear in pixels.
    Linear,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Mode::Normal),
            "linear" => Ok(Mode::Linear),
            _ => Err(config_err!("unknown mode `{s}` (expected normal or linear)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Normal => "normal",
            Mode::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub mixer: MixerKind,
    /// Window extent; `None` for global-attention stages.
    pub window: Option<usize>,
    pub pool_mode: Option<PoolMode>,
    /// Pooled extent at the training resolution.
    pub pool: Option<usize>,
}

impl StageConfig {
    pub fn heads(&self) -> usize {
        self.channels / HEAD_DIM
    }
}

/// Patch-embedding convolution in front of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Resolution the position-bias coordinates are normalized against.
    pub train_resolution: usize,
    pub query_embedding: bool,
    pub positional_tokens: bool,
    pub glu_variant: GluVariant,
}

const STOCK: [&str; 4] = ["micro", "tiny", "small", "base"];

const KEYS: [&str; 7] = ["channels", "blocks", "mlp_ratio", "mixers", "window", "pool_mode", "pool"];

impl ModelConfig {
    pub fn stock_names() -> &'static [&'static str] {
        &STOCK
    }

    pub fn stock(name: &str) -> Result<Self> {
        let (channels, blocks) = match name {
            "micro" => ([48, 96, 192, 384], [2, 2, 15, 2]),
            "tiny" => ([72, 144, 288, 576], [2, 2, 15, 2]),
            "small" => ([72, 144, 288, 576], [5, 5, 22, 5]),
            "base" => ([96, 192, 384, 768], [5, 5, 23, 5]),
            _ => return Err(config_err!("unknown variant `{name}` (expected one of {})", STOCK.join(", "))),
        };
        let ratios = [8, 8, 4, 4];
        let stages = (0..4)
            .map(|s| {
                let attn = s < 3;
                StageConfig {
                    channels: channels[s],
                    blocks: blocks[s],
                    mlp_ratio: ratios[s],
                    mixer: if attn { MixerKind::Aggregated } else { MixerKind::Mhsa },
                    window: attn.then_some(3),
                    pool_mode: attn.then_some(PoolMode::Ratio),
                    pool: attn.then_some(7),
                }
            })
            .collect();
        Ok(ModelConfig::from_stages(stages))
    }

    pub fn from_stages(stages: Vec<StageConfig>) -> Self {
        ModelConfig {
            stages,
            in_channels: 3,
            num_classes: 1000,
            train_resolution: 224,
            query_embedding: true,
            positional_tokens: true,
            glu_variant: GluVariant::ConvGlu,
        }
    }

    /// A stock variant name or a path to a config file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if STOCK.contains(&spec) {
            ModelConfig::stock(spec)
        } else {
            ModelConfig::from_file(spec)
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        text.parse().map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })
    }

    /// Cumulative downsampling factor of the final stage.
    pub fn total_stride(&self) -> usize {
        4 << (self.stages.len() - 1)
    }

    pub fn embed_spec(&self, stage: usize) -> EmbedSpec {
        if stage == 0 {
            EmbedSpec { kernel: 7, stride: 4, pad: 3 }
        } else {
            EmbedSpec { kernel: 3, stride: 2, pad: 1 }
        }
    }

    pub fn stage_stride(&self, stage: usize) -> usize {
        4 << stage
    }

    /// Pooled grid of a stage whose feature map is `h×w`, for an input of
    /// `in_h×in_w`. `None` for global-attention stages.
    pub fn pool_extent(&self, stage: usize, in_h: usize, in_w: usize, h: usize, w: usize, mode: Mode) -> Option<(usize, usize)> {
        let st = &self.stages[stage];
        let pool = st.pool?;
        let scaled = matches!((st.pool_mode?, mode), (PoolMode::Ratio, Mode::Normal));
        let side = |input: usize, feat: usize| {
            let p = if scaled { pool * input / self.train_resolution } else { pool };
            p.clamp(1, feat)
        };
        Some((side(in_h, h), side(in_w, w)))
    }

    /// Feature-map extent of a stage at the training resolution.
    pub fn train_extent(&self, stage: usize) -> usize {
        (self.train_resolution / self.stage_stride(stage)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(config_err!("a model needs at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.channels == 0 || s.channels % HEAD_DIM != 0 {
                return Err(config_err!("stage {n}: channels {} not divisible by head dim {HEAD_DIM}", s.channels));
            }
            if s.blocks == 0 || s.mlp_ratio == 0 {
                return Err(config_err!("stage {n}: blocks and mlp_ratio must be positive"));
            }
            match s.mixer {
                MixerKind::Aggregated => {
                    match s.window {
                        Some(k) if k % 2 == 1 => {}
                        _ => return Err(config_err!("stage {n}: aggregated attention needs an odd window")),
                    }
                    if s.pool_mode.is_none() || !matches!(s.pool, Some(p) if p > 0) {
                        return Err(config_err!("stage {n}: aggregated attention needs pool_mode and a positive pool"));
                    }
                }
                MixerKind::Mhsa => {
                    if s.window.is_some() || s.pool_mode.is_some() || s.pool.is_some() {
                        return Err(config_err!("stage {n}: global attention takes `-` for window, pool_mode and pool"));
                    }
                }
            }
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.train_resolution == 0 {
            return Err(config_err!("input channels, classes and training resolution must be positive"));
        }
        Ok(())
    }

    /// Canonical `key=value` text; parsing it gives back this config.
    pub fn to_config_string(&self) -> String {
        let join = |f: &dyn Fn(&StageConfig) -> String| self.stages.iter().map(f).collect::<Vec<_>>().join(",");
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let rows = [
            join(&|s| s.channels.to_string()),
            join(&|s| s.blocks.to_string()),
            join(&|s| s.mlp_ratio.to_string()),
            join(&|s| match s.mixer {
                MixerKind::Aggregated => "A".into(),
                MixerKind::Mhsa => "M".into(),
            }),
            join(&|s| opt(s.window)),
            join(&|s| match s.pool_mode {
                Some(PoolMode::Ratio) => "ratio".into(),
                Some(PoolMode::Fixed) => "fixed".into(),
                None => "-".into(),
            }),
            join(&|s| opt(s.pool)),
        ];
        KEYS.iter().zip(rows).map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn parse_list<V>(key: &str, raw: &str, f: impl Fn(&str) -> Option<V>) -> Result<Vec<V>> {
    raw.split(',')
        .map(|item| {
            let item = item.trim();
            f(item).ok_or_else(|| config_err!("{key}: cannot parse `{item}`"))
        })
        .collect()
}

fn optional<V>(item: &str, f: impl Fn(&str) -> Option<V>) -> Option<Option<V>> {
    if item == "-" {
        Some(None)
    } else {
        f(item).map(Some)
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut values: [Option<&str>; 7] = [None; 7];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key=value", lineno + 1))?;
            let key = key.trim();
            let slot = KEYS
                .iter()
                .position(|&k| k == key)
                .ok_or_else(|| config_err!("line {}: unknown key `{key}`", lineno + 1))?;
            if values[slot].replace(value.trim()).is_some() {
                return Err(config_err!("line {}: duplicate key `{key}`", lineno + 1));
            }
        }
        let get = |i: usize| values[i].ok_or_else(|| config_err!("missing key `{}`", KEYS[i]));
        let num = |s: &str| s.parse::<usize>().ok();
        let channels = parse_list("channels", get(0)?, num)?;
        let blocks = parse_list("blocks", get(1)?, num)?;
        let ratios = parse_list("mlp_ratio", get(2)?, num)?;
        let mixers = parse_list("mixers", get(3)?, |s| match s {
            "A" => Some(MixerKind::Aggregated),
            "M" => Some(MixerKind::Mhsa),
            _ => None,
        })?;
        let window = parse_list("window", get(4)?, |s| optional(s, num))?;
        let pool_mode = parse_list("pool_mode", get(5)?, |s| {
            optional(s, |s| match s {
                "ratio" => Some(PoolMode::Ratio),
                "fixed" => Some(PoolMode::Fixed),
                _ => None,
            })
        })?;
        let pool = parse_list("pool", get(6)?, |s| optional(s, num))?;
        let n = channels.len();
        let lens = [blocks.len(), ratios.len(), mixers.len(), window.len(), pool_mode.len(), pool.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(config_err!("per-stage lists differ in length: channels has {n}, others {lens:?}"));
        }
        let stages = (0..n)
            .map(|i| StageConfig {
                channels: channels[i],
                blocks: blocks[i],
                mlp_ratio: ratios[i],
                mixer: mixers[i],
                window: window[i],
                pool_mode: pool_mode[i],
                pool: pool[i],
            })
            .collect();
        let cfg = ModelConfig::from_stages(stages);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_rows() {
        let m = ModelConfig::stock("micro").unwrap();
        assert_eq!(
            m.to_config_string(),
            "channels=48,96,192,384\nblocks=2,2,15,2\nmlp_ratio=8,8,4,4\nmixers=A,A,A,M\n\
             window=3,3,3,-\npool_mode=ratio,ratio,ratio,-\npool=7,7,7,-\n"
        );
        let b = ModelConfig::stock("base").unwrap();
        assert_eq!(b.stages.iter().map(|s| s.channels).collect::<Vec<_>>(), [96, 192, 384, 768]);
        assert_eq!(b.stages.iter().map(|s| s.blocks).collect::<Vec<_>>(), [5, 5, 23, 5]);
        let s = ModelConfig::stock("small").unwrap();
        assert_eq!(s.stages.iter().map(|s| s.blocks).collect::<Vec<_>>(), [5, 5, 22, 5]);
        for name in ModelConfig::stock_names() {
            let c = ModelConfig::stock(name).unwrap();
            c.validate().unwrap();
            assert_eq!(c.to_config_string().parse::<ModelConfig>().unwrap(), c);
        }
        assert!(ModelConfig::stock("huge").is_err());
    }

    #[test]
    fn parse_errors() {
        let good = ModelConfig::stock("tiny").unwrap().to_config_string();
        assert!(matches!(good.replace("72,", "70,").parse::<ModelConfig>(), Err(Error::Config(_))));
        assert!(good.replace("pool=7,7,7,-", "pool=7,7,-").parse::<ModelConfig>().is_err());
        assert!(format!("{good}heads=3\n").parse::<ModelConfig>().is_err());
        assert!(good.replace("window=3,3,3,-", "window=4,3,3,-").parse::<ModelConfig>().is_err());
        assert!(good.replace("window=3,3,3,-", "window=3,3,3,3").parse::<ModelConfig>().is_err());
        assert!(good.replace("mixers=A,A,A,M\n", "").parse::<ModelConfig>().is_err());
        let commented = format!("# tiny\n\n{good}");
        assert_eq!(commented.parse::<ModelConfig>().unwrap(), ModelConfig::stock("tiny").unwrap());
    }

    #[test]
    fn pool_extents() {
        let m = ModelConfig::stock("micro").unwrap();
        assert_eq!(m.pool_extent(0, 224, 224, 56, 56, Mode::Normal), Some((7, 7)));
        assert_eq!(m.pool_extent(2, 320, 320, 20, 20, Mode::Normal), Some((10, 10)));
        assert_eq!(m.pool_extent(2, 320, 320, 20, 20, Mode::Linear), Some((7, 7)));
        assert_eq!(m.pool_extent(2, 64, 96, 4, 6, Mode::Linear), Some((4, 6)));
        assert_eq!(m.pool_extent(3, 224, 224, 7, 7, Mode::Normal), None);
        assert_eq!(m.train_extent(0), 56);
        assert_eq!(m.total_stride(), 32);
    }
}
