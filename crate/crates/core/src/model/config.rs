//! Flat `key = value` model configuration.
//!
//! Keys are dotted paths. A file may start from a preset (`preset = base` or
//! `preset = mini`) and override individual keys; [`ModelConfig::to_text`]
//! writes every key in a fixed order.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use crate::blocks::StemConfig;
use crate::error::{Error, Result};
use crate::ladder::{FfnKind, FusionKind, LadderBlockConfig, ShiftSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Conv,
    Ladder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleKind {
    /// Stride-2 MBV2+SE block.
    Mbv2,
    /// 2x2 stride-2 conv.
    Conv2x2,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub kind: StageKind,
    pub channels: usize,
    /// Blocks after the entry downsample.
    pub depth: usize,
    pub downsample: DownsampleKind,
    /// Trailing stride-2 MBV2 block to this width (conv stages only).
    pub exit_channels: Option<usize>,
    /// Heads per branch (ladder stages only).
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderSettings {
    pub branches: usize,
    pub window: usize,
    /// Explicit schedule; `None` uses the default for (branches, window).
    pub shifts: Option<Vec<ShiftSpec>>,
    pub shift: bool,
    pub mask_wrapped: bool,
    pub delivery: bool,
    pub fusion: FusionKind,
    pub ffn: FfnKind,
    pub ffn_residual: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub seed: u64,
    pub input_channels: usize,
    pub resolution: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub ladder: LadderSettings,
    pub mbv2_expansion: f64,
    pub mbv2_se_reduction: usize,
    pub classes: usize,
    pub train: TrainSettings,
}

pub const BUILTIN: [&str; 2] = ["base", "mini"];

impl ModelConfig {
    /// The published base network at 224x224.
    pub fn base() -> Self {
        let conv = |channels, depth, exit| StageSpec {
            kind: StageKind::Conv,
            channels,
            depth,
            downsample: DownsampleKind::Mbv2,
            exit_channels: exit,
            heads: 0,
        };
        ModelConfig {
            name: "base".into(),
            seed: 0,
            input_channels: 3,
            resolution: 224,
            stem_channels: 36,
            stem_stride: 2,
            stages: vec![
                conv(72, 2, None),
                conv(144, 2, Some(288)),
                StageSpec {
                    kind: StageKind::Ladder,
                    channels: 288,
                    depth: 10,
                    downsample: DownsampleKind::None,
                    exit_channels: None,
                    heads: 4,
                },
                StageSpec {
                    kind: StageKind::Ladder,
                    channels: 576,
                    depth: 3,
                    downsample: DownsampleKind::Conv2x2,
                    exit_channels: None,
                    heads: 8,
                },
            ],
            ladder: LadderSettings {
                branches: 3,
                window: 7,
                shifts: None,
                shift: true,
                mask_wrapped: true,
                delivery: true,
                fusion: FusionKind::Pafm,
                ffn: FfnKind::Light,
                ffn_residual: true,
            },
            mbv2_expansion: 4.0,
            mbv2_se_reduction: 4,
            classes: 1000,
            train: TrainSettings {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }

    /// One block per stage at 32x32 with window 4 and small widths.
    ///
    /// 32 -> stem 16 -> stage1 8 -> stage2 8 -> stage3 8 (ladder) -> stage4 4.
    /// Stage 2 keeps its resolution so both ladder stages see window-divisible maps.
    pub fn miniature() -> Self {
        let mut c = Self::base();
        c.name = "mini".into();
        c.resolution = 32;
        c.stem_channels = 6;
        c.stages = vec![
            StageSpec {
                kind: StageKind::Conv,
                channels: 12,
                depth: 1,
                downsample: DownsampleKind::Mbv2,
                exit_channels: None,
                heads: 0,
            },
            StageSpec {
                kind: StageKind::Conv,
                channels: 12,
                depth: 1,
                downsample: DownsampleKind::None,
                exit_channels: None,
                heads: 0,
            },
            StageSpec {
                kind: StageKind::Ladder,
                channels: 12,
                depth: 1,
                downsample: DownsampleKind::None,
                exit_channels: None,
                heads: 2,
            },
            StageSpec {
                kind: StageKind::Ladder,
                channels: 24,
                depth: 1,
                downsample: DownsampleKind::Conv2x2,
                exit_channels: None,
                heads: 2,
            },
        ];
        c.ladder.window = 4;
        c.classes = 2;
        c.train.lr = 3e-3;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "base" => Some(Self::base()),
            "mini" | "miniature" => Some(Self::miniature()),
            _ => None,
        }
    }

    pub fn stem(&self) -> StemConfig {
        StemConfig {
            c_in: self.input_channels,
            c_out: self.stem_channels,
            stride: self.stem_stride,
        }
    }

    /// Block config for ladder stage `i` (0-based).
    pub fn ladder_block(&self, i: usize) -> Result<LadderBlockConfig> {
        let st = &self.stages[i];
        let l = &self.ladder;
        let mut c = LadderBlockConfig::with_geometry(st.channels, l.branches, l.window, st.heads)
            .map_err(|e| rekey(e, &format!("stage{}", i + 1)))?;
        if let Some(s) = &l.shifts {
            c.shifts = s.clone();
        }
        c.shift = l.shift;
        c.mask_wrapped = l.mask_wrapped;
        c.delivery = l.delivery;
        c.fusion = l.fusion;
        c.ffn = l.ffn;
        c.ffn_residual = l.ffn_residual;
        Ok(c)
    }

    /// Spatial size entering each stage and leaving the last one.
    pub fn stage_resolutions(&self) -> Vec<usize> {
        let mut r = self.resolution / self.stem_stride.max(1);
        let mut out = Vec::with_capacity(self.stages.len() + 1);
        for st in &self.stages {
            if st.downsample != DownsampleKind::None {
                r /= 2;
            }
            out.push(r);
            if st.exit_channels.is_some() {
                r /= 2;
            }
        }
        out.push(r);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::config(
                "stages",
                format!("expected 4 stages, got {}", self.stages.len()),
            ));
        }
        if self.classes == 0 {
            return Err(Error::config("head.classes", "must be positive"));
        }
        if self.input_channels == 0 || self.stem_channels == 0 {
            return Err(Error::config("stem.channels", "must be positive"));
        }
        if !(self.stem_stride == 1 || self.stem_stride == 2) {
            return Err(Error::config("stem.stride", "must be 1 or 2"));
        }
        if !(self.mbv2_expansion > 0.0) || self.mbv2_se_reduction == 0 {
            return Err(Error::config(
                "mbv2",
                "expansion and se_reduction must be positive",
            ));
        }
        let mut c = self.stem_channels;
        let mut r = self.resolution;
        if self.stem_stride == 2 {
            if !r.is_multiple_of(2) {
                return Err(Error::config("input.resolution", format!("{r} is odd")));
            }
            r /= 2;
        }
        for (i, st) in self.stages.iter().enumerate() {
            let key = format!("stage{}", i + 1);
            if st.channels == 0 {
                return Err(Error::config(format!("{key}.channels"), "must be positive"));
            }
            match st.downsample {
                DownsampleKind::None => {
                    if st.channels != c {
                        return Err(Error::config(
                            format!("{key}.channels"),
                            format!(
                                "{} channels without a downsample must equal the incoming {c}",
                                st.channels
                            ),
                        ));
                    }
                }
                _ => {
                    if st.channels != 2 * c {
                        return Err(Error::config(
                            format!("{key}.channels"),
                            format!(
                                "downsample must double {c} to {}, got {}",
                                2 * c,
                                st.channels
                            ),
                        ));
                    }
                    if !r.is_multiple_of(2) {
                        return Err(Error::config(
                            format!("{key}.downsample"),
                            format!("cannot halve odd size {r}"),
                        ));
                    }
                    r /= 2;
                }
            }
            match st.kind {
                StageKind::Conv => {
                    if st.downsample == DownsampleKind::Conv2x2 {
                        return Err(Error::config(
                            format!("{key}.downsample"),
                            "conv stages downsample with mbv2",
                        ));
                    }
                }
                StageKind::Ladder => {
                    if st.exit_channels.is_some() {
                        return Err(Error::config(
                            format!("{key}.exit_channels"),
                            "only conv stages have an exit block",
                        ));
                    }
                    if st.downsample == DownsampleKind::Mbv2 {
                        return Err(Error::config(
                            format!("{key}.downsample"),
                            "ladder stages downsample with conv2x2",
                        ));
                    }
                    let lc = self.ladder_block(i)?;
                    lc.validate().map_err(|e| rekey(e, &key))?;
                    if !r.is_multiple_of(lc.window) {
                        return Err(Error::config(
                            format!("{key}.window"),
                            format!("spatial {r}x{r} not divisible by window {}", lc.window),
                        ));
                    }
                }
            }
            c = st.channels;
            if let Some(e) = st.exit_channels {
                if e != 2 * c {
                    return Err(Error::config(
                        format!("{key}.exit_channels"),
                        format!("exit block must double {c} to {}, got {e}", 2 * c),
                    ));
                }
                if !r.is_multiple_of(2) {
                    return Err(Error::config(
                        format!("{key}.exit_channels"),
                        format!("cannot halve odd size {r}"),
                    ));
                }
                r /= 2;
                c = e;
            }
        }
        Ok(())
    }

    /// Channel count leaving the last stage.
    pub fn final_channels(&self) -> usize {
        let last = self.stages.last().expect("validated config has stages");
        last.exit_channels.unwrap_or(last.channels)
    }

    /// Lines describing every deviation from the base window, for reports.
    pub fn deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.ladder.window != 7 {
            out.push(format!(
                "window {} instead of 7 (ladder stage maps {:?})",
                self.ladder.window,
                self.stage_resolutions()
            ));
            if let Ok(s) =
                crate::ladder::window::default_shifts(self.ladder.branches, self.ladder.window)
            {
                if self.ladder.shifts.is_none() {
                    let list: Vec<String> = s.iter().map(ToString::to_string).collect();
                    out.push(format!("shift schedule scaled to {}", list.join(" ")));
                }
            }
        }
        out
    }

    // --- text form ------------------------------------------------------------

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &IndexMap<String, String>) -> Result<Self> {
        let mut cfg = match pairs.get("preset") {
            Some(p) => Self::preset(p)
                .ok_or_else(|| Error::config("preset", format!("unknown preset {p:?}")))?,
            None => Self::base(),
        };
        for (k, v) in pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override without re-validating.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |msg: String| Error::config(key.to_string(), msg);
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| bad(format!("expected a non-negative integer, got {value:?}")))
        };
        let float = || {
            value
                .parse::<f64>()
                .map_err(|_| bad(format!("expected a number, got {value:?}")))
        };
        let flag =
            || parse_bool(value).ok_or_else(|| bad(format!("expected on/off, got {value:?}")));
        match key {
            "name" => self.name = value.to_string(),
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| bad(format!("expected an integer seed, got {value:?}")))?
            }
            "input.channels" => self.input_channels = int()?,
            "input.resolution" => self.resolution = int()?,
            "stem.channels" => self.stem_channels = int()?,
            "stem.stride" => self.stem_stride = int()?,
            "ladder.branches" => {
                self.ladder.branches = int()?;
            }
            "ladder.window" => self.ladder.window = int()?,
            "ladder.shift" => self.ladder.shift = flag()?,
            "ladder.shifts" => {
                self.ladder.shifts = if value == "default" {
                    None
                } else {
                    Some(parse_shifts(value).map_err(bad)?)
                }
            }
            "ladder.mask_wrapped" => self.ladder.mask_wrapped = flag()?,
            "ladder.delivery" => self.ladder.delivery = flag()?,
            "ladder.fusion" => {
                self.ladder.fusion = FusionKind::parse(value).ok_or_else(|| {
                    bad(format!("unknown fusion {value:?} (pafm|fc|aw|concat|se)"))
                })?
            }
            "ladder.ffn" => {
                self.ladder.ffn = FfnKind::parse(value)
                    .ok_or_else(|| bad(format!("unknown ffn {value:?} (lffn|ffn)")))?
            }
            "ladder.ffn_residual" => self.ladder.ffn_residual = flag()?,
            "mbv2.expansion" => self.mbv2_expansion = float()?,
            "mbv2.se_reduction" => self.mbv2_se_reduction = int()?,
            "head.classes" => self.classes = int()?,
            "train.lr" => self.train.lr = float()?,
            "train.beta1" => self.train.beta1 = float()?,
            "train.beta2" => self.train.beta2 = float()?,
            "train.eps" => self.train.eps = float()?,
            _ => return self.set_stage(key, value),
        }
        Ok(())
    }

    fn set_stage(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::config(key.to_string(), "unknown key");
        let (stage, field) = key.split_once('.').ok_or_else(unknown)?;
        let idx: usize = stage
            .strip_prefix("stage")
            .and_then(|n| n.parse().ok())
            .ok_or_else(unknown)?;
        if idx == 0 || idx > self.stages.len() {
            return Err(Error::config(
                key.to_string(),
                format!("stage index must be 1..={}", self.stages.len()),
            ));
        }
        let bad = |msg: String| Error::config(key.to_string(), msg);
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| bad(format!("expected a non-negative integer, got {value:?}")))
        };
        let st = &mut self.stages[idx - 1];
        match field {
            "kind" => {
                st.kind = match value {
                    "conv" => StageKind::Conv,
                    "ladder" => StageKind::Ladder,
                    _ => return Err(bad(format!("expected conv or ladder, got {value:?}"))),
                }
            }
            "channels" => st.channels = int()?,
            "depth" => st.depth = int()?,
            "heads" => st.heads = int()?,
            "downsample" => {
                st.downsample = match value {
                    "mbv2" => DownsampleKind::Mbv2,
                    "conv2x2" => DownsampleKind::Conv2x2,
                    "none" => DownsampleKind::None,
                    _ => {
                        return Err(bad(format!(
                            "expected mbv2, conv2x2 or none, got {value:?}"
                        )))
                    }
                }
            }
            "exit_channels" => st.exit_channels = if value == "none" { None } else { Some(int()?) },
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Every key in a fixed order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let onoff = |b: bool| if b { "on" } else { "off" };
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "input.channels = {}", self.input_channels);
        let _ = writeln!(s, "input.resolution = {}", self.resolution);
        let _ = writeln!(s, "stem.channels = {}", self.stem_channels);
        let _ = writeln!(s, "stem.stride = {}", self.stem_stride);
        for (i, st) in self.stages.iter().enumerate() {
            let k = format!("stage{}", i + 1);
            let kind = match st.kind {
                StageKind::Conv => "conv",
                StageKind::Ladder => "ladder",
            };
            let down = match st.downsample {
                DownsampleKind::Mbv2 => "mbv2",
                DownsampleKind::Conv2x2 => "conv2x2",
                DownsampleKind::None => "none",
            };
            let _ = writeln!(s, "{k}.kind = {kind}");
            let _ = writeln!(s, "{k}.channels = {}", st.channels);
            let _ = writeln!(s, "{k}.depth = {}", st.depth);
            let _ = writeln!(s, "{k}.downsample = {down}");
            match st.exit_channels {
                Some(e) => {
                    let _ = writeln!(s, "{k}.exit_channels = {e}");
                }
                None => {
                    let _ = writeln!(s, "{k}.exit_channels = none");
                }
            }
            let _ = writeln!(s, "{k}.heads = {}", st.heads);
        }
        let l = &self.ladder;
        let _ = writeln!(s, "ladder.branches = {}", l.branches);
        let _ = writeln!(s, "ladder.window = {}", l.window);
        match &l.shifts {
            Some(v) => {
                let list: Vec<String> = v.iter().map(|s| format!("{}:{}", s.dy, s.dx)).collect();
                let _ = writeln!(s, "ladder.shifts = {}", list.join(","));
            }
            None => {
                let _ = writeln!(s, "ladder.shifts = default");
            }
        }
        let _ = writeln!(s, "ladder.shift = {}", onoff(l.shift));
        let _ = writeln!(s, "ladder.mask_wrapped = {}", onoff(l.mask_wrapped));
        let _ = writeln!(s, "ladder.delivery = {}", onoff(l.delivery));
        let _ = writeln!(s, "ladder.fusion = {}", l.fusion.name());
        let _ = writeln!(s, "ladder.ffn = {}", l.ffn.name());
        let _ = writeln!(s, "ladder.ffn_residual = {}", onoff(l.ffn_residual));
        let _ = writeln!(s, "mbv2.expansion = {}", self.mbv2_expansion);
        let _ = writeln!(s, "mbv2.se_reduction = {}", self.mbv2_se_reduction);
        let _ = writeln!(s, "head.classes = {}", self.classes);
        let _ = writeln!(s, "train.lr = {}", self.train.lr);
        let _ = writeln!(s, "train.beta1 = {}", self.train.beta1);
        let _ = writeln!(s, "train.beta2 = {}", self.train.beta2);
        let _ = writeln!(s, "train.eps = {}", self.train.eps);
        s
    }
}

fn rekey(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { path, msg } => Error::Config {
            path: format!("{prefix}/{path}"),
            msg,
        },
        other => other,
    }
}

pub fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// `dy:dx,dy:dx,...`
pub fn parse_shifts(v: &str) -> std::result::Result<Vec<ShiftSpec>, String> {
    v.split(',')
        .map(|item| {
            let (a, b) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("shift {item:?} is not dy:dx"))?;
            let dy = a
                .trim()
                .parse()
                .map_err(|_| format!("bad dy in {item:?}"))?;
            let dx = b
                .trim()
                .parse()
                .map_err(|_| format!("bad dx in {item:?}"))?;
            Ok(ShiftSpec::new(dy, dx))
        })
        .collect()
}

/// Splits `key = value` lines; `#` starts a comment. Repeated keys are an error.
pub fn parse_pairs(text: &str) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", n + 1),
                format!("expected key = value, got {line:?}"),
            )
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}", n + 1), "empty key"));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(
                k.to_string(),
                format!("repeated on line {}", n + 1),
            ));
        }
    }
    Ok(out)
}
