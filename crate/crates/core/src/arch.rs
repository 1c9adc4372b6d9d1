//! Architecture descriptions: a line-oriented DSL, canonical builders and the
//! pass that swaps shape-preserving blocks for LPR blocks.
//!
//! ```text
//! # comment
//! input 3 224 224
//! rank_div 8          # optional, default 8
//! width 3/4           # optional, default 1
//! conv out=32 k=3 s=2
//! dsc out=64 s=1
//! dsc_down out=128
//! shuffle_down out=116
//! lpr rank_div=8
//! maxpool
//! avgpool
//! fc out=1000
//! ```
//!
//! Attributes are `key=value` with integer values in any order.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::layers::LprHyper;

/// Per-sample feature shape `(c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Positive rational channel multiplier, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthMult {
    num: u64,
    den: u64,
}

impl WidthMult {
    pub const ONE: WidthMult = WidthMult { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config("width multiplier must be positive".into()));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    /// Parses `"3/4"`, `"0.75"` or `"2"`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid width multiplier {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Self::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        Self::new(int * den + frac, den)
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }

    /// Scales a channel count to the nearest multiple of 8 (half rounds up),
    /// minimum 8. A unit multiplier leaves counts untouched.
    pub fn scale_channels(&self, c: usize) -> usize {
        if self.is_one() {
            return c;
        }
        let c = c as u64;
        let rounded = (2 * c * self.num + 8 * self.den) / (16 * self.den) * 8;
        rounded.max(8) as usize
    }
}

impl fmt::Display for WidthMult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// One block of a linear network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleSpec {
    Conv {
        out: usize,
        k: usize,
        stride: usize,
    },
    DepthwiseConv {
        k: usize,
        stride: usize,
    },
    Pointwise {
        out: usize,
    },
    Dsc {
        out: usize,
        k: usize,
        stride: usize,
    },
    DscDown {
        out: usize,
    },
    ShuffleDown {
        out: usize,
    },
    /// Channels are inherited from the input.
    Lpr {
        rank_div: Option<usize>,
        rank: Option<usize>,
        k: usize,
    },
    AvgPool,
    MaxPool,
    Fc {
        out: usize,
    },
}

impl ModuleSpec {
    pub fn keyword(&self) -> &'static str {
        match self {
            ModuleSpec::Conv { .. } => "conv",
            ModuleSpec::DepthwiseConv { .. } => "dwconv",
            ModuleSpec::Pointwise { .. } => "pwconv",
            ModuleSpec::Dsc { .. } => "dsc",
            ModuleSpec::DscDown { .. } => "dsc_down",
            ModuleSpec::ShuffleDown { .. } => "shuffle_down",
            ModuleSpec::Lpr { .. } => "lpr",
            ModuleSpec::AvgPool => "avgpool",
            ModuleSpec::MaxPool => "maxpool",
            ModuleSpec::Fc { .. } => "fc",
        }
    }

    pub fn stride(&self) -> usize {
        match *self {
            ModuleSpec::Conv { stride, .. }
            | ModuleSpec::DepthwiseConv { stride, .. }
            | ModuleSpec::Dsc { stride, .. } => stride,
            ModuleSpec::DscDown { .. } | ModuleSpec::ShuffleDown { .. } | ModuleSpec::MaxPool => 2,
            _ => 1,
        }
    }

    /// Same module with every width-scalable `out` passed through `f`.
    fn map_out(self, f: impl Fn(usize) -> usize) -> Self {
        match self {
            ModuleSpec::Conv { out, k, stride } => ModuleSpec::Conv {
                out: f(out),
                k,
                stride,
            },
            ModuleSpec::Pointwise { out } => ModuleSpec::Pointwise { out: f(out) },
            ModuleSpec::Dsc { out, k, stride } => ModuleSpec::Dsc {
                out: f(out),
                k,
                stride,
            },
            ModuleSpec::DscDown { out } => ModuleSpec::DscDown { out: f(out) },
            ModuleSpec::ShuffleDown { out } => ModuleSpec::ShuffleDown { out: f(out) },
            other => other,
        }
    }
}

impl fmt::Display for ModuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())?;
        match *self {
            ModuleSpec::Conv { out, k, stride } | ModuleSpec::Dsc { out, k, stride } => {
                write!(f, " out={out} k={k} s={stride}")
            }
            ModuleSpec::DepthwiseConv { k, stride } => write!(f, " k={k} s={stride}"),
            ModuleSpec::Pointwise { out }
            | ModuleSpec::DscDown { out }
            | ModuleSpec::ShuffleDown { out }
            | ModuleSpec::Fc { out } => write!(f, " out={out}"),
            ModuleSpec::Lpr { rank_div, rank, k } => {
                if let Some(d) = rank_div {
                    write!(f, " rank_div={d}")?;
                }
                if let Some(r) = rank {
                    write!(f, " r={r}")?;
                }
                write!(f, " k={k}")
            }
            ModuleSpec::AvgPool | ModuleSpec::MaxPool => Ok(()),
        }
    }
}

/// A block after width scaling and shape propagation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedModule {
    pub name: String,
    /// Channel counts already scaled by the width multiplier.
    pub spec: ModuleSpec,
    pub input: FeatureShape,
    pub output: FeatureShape,
    /// Inner rank, for LPR blocks.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub input: FeatureShape,
    pub modules: Vec<ModuleSpec>,
    pub width: WidthMult,
    pub rank_div: usize,
}

impl ArchitectureSpec {
    pub fn new(input: FeatureShape, modules: Vec<ModuleSpec>) -> Self {
        Self {
            input,
            modules,
            width: WidthMult::ONE,
            rank_div: LprHyper::DEFAULT_RANK_DIV,
        }
    }

    pub fn with_width(mut self, width: WidthMult) -> Self {
        self.width = width;
        self
    }

    pub fn with_rank_div(mut self, rank_div: usize) -> Self {
        self.rank_div = rank_div;
        self
    }

    /// Applies the width multiplier and propagates shapes end to end.
    pub fn resolve(&self) -> Result<Vec<ResolvedModule>> {
        self.resolve_indexed().map_err(|(_, e)| e)
    }

    fn resolve_indexed(&self) -> std::result::Result<Vec<ResolvedModule>, (usize, Error)> {
        if self.rank_div == 0 {
            return Err((0, Error::Config("rank_div must be positive".into())));
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.modules.len());
        for (i, m) in self.modules.iter().enumerate() {
            let spec = m.map_out(|c| self.width.scale_channels(c));
            let (next, rank) = propagate(&spec, shape, self.rank_div).map_err(|e| {
                (
                    i,
                    Error::Config(format!("module {i} ({}): {e}", spec.keyword())),
                )
            })?;
            out.push(ResolvedModule {
                name: format!("{i:02}_{}", spec.keyword()),
                spec,
                input: shape,
                output: next,
                rank,
            });
            shape = next;
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(self
            .resolve()?
            .last()
            .map(|m| m.output)
            .unwrap_or(self.input))
    }

    /// Canonical DSL text; `parse_arch(&spec.render()) == spec`.
    pub fn render(&self) -> String {
        let mut s = format!("input {} {} {}\n", self.input.c, self.input.h, self.input.w);
        if self.rank_div != LprHyper::DEFAULT_RANK_DIV {
            s.push_str(&format!("rank_div {}\n", self.rank_div));
        }
        if !self.width.is_one() {
            s.push_str(&format!("width {}\n", self.width));
        }
        for m in &self.modules {
            s.push_str(&m.to_string());
            s.push('\n');
        }
        s
    }

    /// Swaps every stride-1, channel-preserving `conv`/`dsc` block (odd kernel)
    /// for an LPR block using the spec's `rank_div`. Everything else, and every
    /// intermediate shape, is unchanged.
    pub fn replace_with_lpr(&self) -> Result<Self> {
        let resolved = self.resolve()?;
        let modules = self
            .modules
            .iter()
            .zip(&resolved)
            .map(|(orig, r)| match r.spec {
                ModuleSpec::Conv { k, stride: 1, .. } | ModuleSpec::Dsc { k, stride: 1, .. }
                    if r.input.c == r.output.c && k % 2 == 1 =>
                {
                    ModuleSpec::Lpr {
                        rank_div: None,
                        rank: None,
                        k,
                    }
                }
                _ => *orig,
            })
            .collect();
        Ok(Self {
            modules,
            ..self.clone()
        })
    }
}

fn same_dim(input: usize, k: usize, stride: usize) -> Result<usize> {
    let pad = k / 2;
    if input + 2 * pad < k {
        return Err(Error::Geometry(format!("kernel {k} exceeds input {input}")));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "stride must be 1 or 2, got {stride}"
        )))
    }
}

fn check_positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

fn propagate(
    spec: &ModuleSpec,
    s: FeatureShape,
    rank_div: usize,
) -> Result<(FeatureShape, Option<usize>)> {
    let spatial = |k: usize, stride: usize| -> Result<(usize, usize)> {
        check_positive("kernel size", k)?;
        check_stride(stride)?;
        Ok((same_dim(s.h, k, stride)?, same_dim(s.w, k, stride)?))
    };
    let shape = match *spec {
        ModuleSpec::Conv { out, k, stride } | ModuleSpec::Dsc { out, k, stride } => {
            check_positive("out", out)?;
            let (h, w) = spatial(k, stride)?;
            FeatureShape::new(out, h, w)
        }
        ModuleSpec::DepthwiseConv { k, stride } => {
            let (h, w) = spatial(k, stride)?;
            FeatureShape::new(s.c, h, w)
        }
        ModuleSpec::Pointwise { out } => {
            check_positive("out", out)?;
            FeatureShape::new(out, s.h, s.w)
        }
        ModuleSpec::DscDown { out } => {
            check_positive("out", out)?;
            let (h, w) = spatial(3, 2)?;
            FeatureShape::new(out, h, w)
        }
        ModuleSpec::ShuffleDown { out } => {
            check_positive("out", out)?;
            if out % 2 != 0 {
                return Err(Error::Config(format!(
                    "shuffle_down needs an even channel count, got {out}"
                )));
            }
            let (h, w) = spatial(3, 2)?;
            FeatureShape::new(out, h, w)
        }
        ModuleSpec::Lpr {
            rank_div: d,
            rank,
            k,
        } => {
            let r = rank.unwrap_or_else(|| LprHyper::rank_for(s.c, d.unwrap_or(rank_div)));
            let mut hyper = LprHyper::with_rank_div(s.c, d.unwrap_or(rank_div)).rank(r);
            hyper.k_size = k;
            hyper.validate()?;
            return Ok((s, Some(r)));
        }
        ModuleSpec::AvgPool => FeatureShape::new(s.c, 1, 1),
        ModuleSpec::MaxPool => {
            let d = |x: usize| (x + 2 - 3) / 2 + 1;
            if s.h + 2 < 3 || s.w + 2 < 3 {
                return Err(Error::Geometry("maxpool window exceeds input".into()));
            }
            FeatureShape::new(s.c, d(s.h), d(s.w))
        }
        ModuleSpec::Fc { out } => {
            check_positive("out", out)?;
            FeatureShape::new(out, 1, 1)
        }
    };
    Ok((shape, None))
}

/// Parses the architecture DSL. Errors carry 1-based line and column.
pub fn parse_arch(text: &str) -> Result<ArchitectureSpec> {
    let mut input: Option<FeatureShape> = None;
    let mut rank_div = LprHyper::DEFAULT_RANK_DIV;
    let mut width = WidthMult::ONE;
    let mut modules = Vec::new();
    let mut module_lines = Vec::new();
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let content = raw.split('#').next().unwrap_or("");
        let tokens = tokenize(content);
        let Some(&(col, head)) = tokens.first() else {
            continue;
        };
        let err = |column: usize, message: String| Error::Parse {
            line: line_no,
            column,
            message,
        };
        let args = &tokens[1..];

        if input.is_none() {
            if head != "input" {
                return Err(err(col, format!("expected `input C H W`, found `{head}`")));
            }
            if args.len() != 3 {
                return Err(err(col, "`input` takes exactly three integers".into()));
            }
            let mut dims = [0usize; 3];
            for (d, &(c, tok)) in dims.iter_mut().zip(args) {
                *d =
                    tok.parse().ok().filter(|&v| v > 0).ok_or_else(|| {
                        err(c, format!("expected a positive integer, found `{tok}`"))
                    })?;
            }
            input = Some(FeatureShape::new(dims[0], dims[1], dims[2]));
            continue;
        }

        match head {
            "input" => return Err(err(col, "duplicate `input` line".into())),
            "rank_div" | "width" if !modules.is_empty() => {
                return Err(err(col, format!("`{head}` must precede the first module")))
            }
            "rank_div" => {
                let &[(c, tok)] = args else {
                    return Err(err(col, "`rank_div` takes one integer".into()));
                };
                rank_div =
                    tok.parse().ok().filter(|&v| v > 0).ok_or_else(|| {
                        err(c, format!("expected a positive integer, found `{tok}`"))
                    })?;
            }
            "width" => {
                let &[(c, tok)] = args else {
                    return Err(err(col, "`width` takes one value such as 3/4".into()));
                };
                width = WidthMult::parse(tok).map_err(|e| err(c, e.to_string()))?;
            }
            _ => {
                let module = parse_module(head, col, args).map_err(|(c, m)| err(c, m))?;
                modules.push(module);
                module_lines.push(line_no);
            }
        }
    }

    let input = input.ok_or_else(|| Error::Parse {
        line: last_line.max(1),
        column: 1,
        message: "missing `input C H W` line".into(),
    })?;
    let spec = ArchitectureSpec {
        input,
        modules,
        width,
        rank_div,
    };
    spec.resolve_indexed().map_err(|(i, e)| Error::Parse {
        line: module_lines.get(i).copied().unwrap_or(1),
        column: 1,
        message: e.to_string(),
    })?;
    Ok(spec)
}

fn tokenize(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &line[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out.into_iter()
        .map(|(byte, tok)| (line[..byte].chars().count() + 1, tok))
        .collect()
}

type ModuleError = (usize, String);

fn parse_module(
    head: &str,
    col: usize,
    args: &[(usize, &str)],
) -> std::result::Result<ModuleSpec, ModuleError> {
    let allowed: &[&str] = match head {
        "conv" => &["out", "k", "s"],
        "dwconv" => &["k", "s"],
        "pwconv" | "dsc_down" | "shuffle_down" | "fc" => &["out"],
        "dsc" => &["out", "k", "s"],
        "lpr" => &["rank_div", "r", "k"],
        "avgpool" | "maxpool" => &[],
        _ => return Err((col, format!("unknown module kind `{head}`"))),
    };
    let mut attrs: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for &(c, tok) in args {
        let Some((key, value)) = tok.split_once('=') else {
            return Err((c, format!("expected key=value, found `{tok}`")));
        };
        if head == "lpr" && key == "out" {
            return Err((
                c,
                "LPR may not change channels: `out` is not allowed (output == input)".into(),
            ));
        }
        if !allowed.contains(&key) {
            return Err((c, format!("unknown attribute `{key}` for `{head}`")));
        }
        let v: usize = value.parse().map_err(|_| {
            (
                c + key.len() + 1,
                format!("`{key}` needs an integer, found `{value}`"),
            )
        })?;
        if attrs.insert(key, (v, c)).is_some() {
            return Err((c, format!("duplicate attribute `{key}`")));
        }
    }
    let get = |k: &str| attrs.get(k).map(|&(v, _)| v);
    let required = |k: &str| get(k).ok_or((col, format!("`{head}` requires `{k}=`")));
    let stride = |default: usize| -> std::result::Result<usize, ModuleError> {
        match attrs.get("s") {
            None => Ok(default),
            Some(&(s @ (1 | 2), _)) => Ok(s),
            Some(&(s, c)) => Err((c, format!("stride must be 1 or 2, got {s}"))),
        }
    };
    let positive = |k: &str| -> std::result::Result<(), ModuleError> {
        match attrs.get(k) {
            Some(&(0, c)) => Err((c, format!("`{k}` must be positive"))),
            _ => Ok(()),
        }
    };
    for k in ["out", "k", "r", "rank_div"] {
        positive(k)?;
    }
    Ok(match head {
        "conv" => ModuleSpec::Conv {
            out: required("out")?,
            k: get("k").unwrap_or(3),
            stride: stride(1)?,
        },
        "dwconv" => ModuleSpec::DepthwiseConv {
            k: get("k").unwrap_or(3),
            stride: stride(1)?,
        },
        "pwconv" => ModuleSpec::Pointwise {
            out: required("out")?,
        },
        "dsc" => ModuleSpec::Dsc {
            out: required("out")?,
            k: get("k").unwrap_or(3),
            stride: stride(1)?,
        },
        "dsc_down" => ModuleSpec::DscDown {
            out: required("out")?,
        },
        "shuffle_down" => ModuleSpec::ShuffleDown {
            out: required("out")?,
        },
        "lpr" => ModuleSpec::Lpr {
            rank_div: get("rank_div"),
            rank: get("r"),
            k: get("k").unwrap_or(3),
        },
        "avgpool" => ModuleSpec::AvgPool,
        "maxpool" => ModuleSpec::MaxPool,
        "fc" => ModuleSpec::Fc {
            out: required("out")?,
        },
        _ => unreachable!("kind checked above"),
    })
}

pub const IMAGENET_INPUT: FeatureShape = FeatureShape::new(3, 224, 224);
pub const IMAGENET_CLASSES: usize = 1000;

/// MobileNetv1: stem conv, 13 depthwise separable blocks, average pool, classifier.
pub fn mobilenet_v1(width: WidthMult) -> ArchitectureSpec {
    use ModuleSpec::*;
    let dsc = |out| Dsc {
        out,
        k: 3,
        stride: 1,
    };
    let mut modules = vec![
        Conv {
            out: 32,
            k: 3,
            stride: 2,
        },
        dsc(64),
        DscDown { out: 128 },
        dsc(128),
        DscDown { out: 256 },
        dsc(256),
        DscDown { out: 512 },
    ];
    modules.extend(std::iter::repeat_n(dsc(512), 5));
    modules.extend([
        DscDown { out: 1024 },
        dsc(1024),
        AvgPool,
        Fc {
            out: IMAGENET_CLASSES,
        },
    ]);
    ArchitectureSpec::new(IMAGENET_INPUT, modules).with_width(width)
}

/// MobileNetv1 with its stride-1, channel-preserving blocks replaced by LPR.
pub fn lprnet_mobilenet(width: WidthMult, rank_div: usize) -> Result<ArchitectureSpec> {
    mobilenet_v1(width)
        .with_rank_div(rank_div)
        .replace_with_lpr()
}

/// Stage output channels `[stage2, stage3, stage4, conv5]` of ShuffleNetv2.
fn shufflev2_channels(width: WidthMult) -> [usize; 4] {
    match (width.num(), width.den()) {
        (1, 2) => [48, 96, 192, 1024],
        (1, 1) => [116, 232, 464, 1024],
        (3, 2) => [176, 352, 704, 1024],
        (2, 1) => [244, 488, 976, 2048],
        _ => [
            width.scale_channels(116),
            width.scale_channels(232),
            width.scale_channels(464),
            1024,
        ],
    }
}

/// ShuffleNetv2 stage schedule (repeats 4/8/4): every stage opens with the
/// two-branch stride-2 unit; the remaining stride-1 units are whole LPR blocks.
pub fn lprnet_shufflev2(width: WidthMult, rank_div: usize) -> ArchitectureSpec {
    use ModuleSpec::*;
    let [s2, s3, s4, last] = shufflev2_channels(width);
    let lpr = Lpr {
        rank_div: None,
        rank: None,
        k: 3,
    };
    let mut modules = vec![
        Conv {
            out: 24,
            k: 3,
            stride: 2,
        },
        MaxPool,
    ];
    for (out, repeats) in [(s2, 4), (s3, 8), (s4, 4)] {
        modules.push(ShuffleDown { out });
        modules.extend(std::iter::repeat_n(lpr, repeats - 1));
    }
    modules.extend([
        Conv {
            out: last,
            k: 1,
            stride: 1,
        },
        AvgPool,
        Fc {
            out: IMAGENET_CLASSES,
        },
    ]);
    ArchitectureSpec::new(IMAGENET_INPUT, modules).with_rank_div(rank_div)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_three_module_example() {
        let spec = parse_arch("input 3 224 224\nconv out=32 k=3 s=2\nlpr rank_div=8").unwrap();
        assert_eq!(spec.input, FeatureShape::new(3, 224, 224));
        assert_eq!(spec.modules.len(), 2);
        let r = spec.resolve().unwrap();
        assert_eq!(r[1].output, FeatureShape::new(32, 112, 112));
        assert_eq!(r[1].rank, Some(4));
    }

    #[test]
    fn lpr_with_out_is_rejected() {
        let e = parse_arch("input 64 8 8\nlpr out=64").unwrap_err();
        match e {
            Error::Parse {
                line,
                column,
                message,
            } => {
                assert_eq!((line, column), (2, 5));
                assert!(message.contains("LPR may not change channels"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_locations() {
        let cases = [
            ("input 3 8 8\nfoo out=3", 2, 1, "unknown module"),
            ("input 3 8 8\nconv out=3 out=4", 2, 12, "duplicate"),
            ("# hi\n\ninput 3 8 8\n  conv out=x", 4, 12, "integer"),
            ("input 3 8 8\nconv out=4 s=3", 2, 12, "stride"),
            ("conv out=3", 1, 1, "input"),
            (
                "input 3 8 8\nconv out=4 k=3 s=1 # comment\nshuffle_down out=5",
                3,
                1,
                "even",
            ),
            ("input 3 8 8\nlpr r=9", 2, 1, "rank"),
        ];
        for (text, line, column, needle) in cases {
            match parse_arch(text) {
                Err(Error::Parse {
                    line: l,
                    column: c,
                    message,
                }) => {
                    assert_eq!((l, c), (line, column), "{text:?}: {message}");
                    assert!(message.contains(needle), "{text:?}: {message}");
                }
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn width_rounding() {
        let w = WidthMult::parse("0.25").unwrap();
        assert_eq!(w, WidthMult::new(1, 4).unwrap());
        assert_eq!(w.scale_channels(32), 8);
        assert_eq!(w.scale_channels(16), 8, "minimum 8");
        assert_eq!(WidthMult::parse("0.75").unwrap().scale_channels(1024), 768);
        assert_eq!(WidthMult::parse("1.3").unwrap().scale_channels(64), 80); // 83.2
        assert_eq!(WidthMult::parse("0.5").unwrap().scale_channels(24), 16); // 12 rounds up
        assert_eq!(WidthMult::ONE.scale_channels(116), 116);
        assert!(WidthMult::parse("0").is_err());
        assert!(WidthMult::parse("abc").is_err());
    }

    #[test]
    fn mobilenet_shapes() {
        let spec = mobilenet_v1(WidthMult::ONE);
        assert_eq!(spec.modules.len(), 16);
        let r = spec.resolve().unwrap();
        assert_eq!(r[0].output, FeatureShape::new(32, 112, 112));
        assert_eq!(r[13].output, FeatureShape::new(1024, 7, 7));
        assert_eq!(spec.output_shape().unwrap(), FeatureShape::new(1000, 1, 1));
    }

    /// Counts qualifying blocks by walking the channel/stride table directly.
    #[test]
    fn mobilenet_replacement_count() {
        let table = [
            (32, 64, 1),
            (64, 128, 2),
            (128, 128, 1),
            (128, 256, 2),
            (256, 256, 1),
            (256, 512, 2),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 1024, 2),
            (1024, 1024, 1),
        ];
        let expected = table.iter().filter(|(i, o, s)| i == o && *s == 1).count();
        assert_eq!(expected, 8);
        let lpr = lprnet_mobilenet(WidthMult::ONE, 8).unwrap();
        let n = lpr
            .modules
            .iter()
            .filter(|m| matches!(m, ModuleSpec::Lpr { .. }))
            .count();
        assert_eq!(n, expected);
    }

    #[test]
    fn replacement_preserves_shapes_and_is_idempotent() {
        let base = mobilenet_v1(WidthMult::parse("0.5").unwrap());
        let once = base.replace_with_lpr().unwrap();
        let a: Vec<_> = base.resolve().unwrap().iter().map(|m| m.output).collect();
        let b: Vec<_> = once.resolve().unwrap().iter().map(|m| m.output).collect();
        assert_eq!(a, b);
        assert_eq!(once.replace_with_lpr().unwrap(), once);
    }

    #[test]
    fn stride_two_only_is_fixed_point() {
        let spec =
            parse_arch("input 3 32 32\ndsc_down out=16\ndsc out=32 s=2\nconv out=32 k=3 s=2")
                .unwrap();
        assert_eq!(spec.replace_with_lpr().unwrap(), spec);
    }

    #[test]
    fn shufflev2_schedule() {
        let spec = lprnet_shufflev2(WidthMult::ONE, 8);
        let r = spec.resolve().unwrap();
        let downs: Vec<_> = r
            .iter()
            .filter(|m| matches!(m.spec, ModuleSpec::ShuffleDown { .. }))
            .map(|m| (m.input, m.output))
            .collect();
        assert_eq!(
            downs,
            [
                (
                    FeatureShape::new(24, 56, 56),
                    FeatureShape::new(116, 28, 28)
                ),
                (
                    FeatureShape::new(116, 28, 28),
                    FeatureShape::new(232, 14, 14)
                ),
                (FeatureShape::new(232, 14, 14), FeatureShape::new(464, 7, 7)),
            ]
        );
        let lprs = r.iter().filter(|m| m.rank.is_some()).count();
        assert_eq!(lprs, 3 + 7 + 3);
        assert_eq!(spec.output_shape().unwrap(), FeatureShape::new(1000, 1, 1));
    }

    fn module_strategy() -> impl Strategy<Value = ModuleSpec> {
        let ch = 1usize..64;
        let k = prop_oneof![Just(1usize), Just(3), Just(5)];
        let s = 1usize..=2;
        prop_oneof![
            (ch.clone(), k.clone(), s.clone()).prop_map(|(out, k, stride)| ModuleSpec::Conv {
                out,
                k,
                stride
            }),
            (k.clone(), s.clone()).prop_map(|(k, stride)| ModuleSpec::DepthwiseConv { k, stride }),
            ch.clone().prop_map(|out| ModuleSpec::Pointwise { out }),
            (ch.clone(), k.clone(), s).prop_map(|(out, k, stride)| ModuleSpec::Dsc {
                out,
                k,
                stride
            }),
            ch.clone().prop_map(|out| ModuleSpec::DscDown { out }),
            ch.clone()
                .prop_map(|h| ModuleSpec::ShuffleDown { out: 2 * h }),
            (
                proptest::option::of(1usize..16),
                proptest::option::of(1usize..2),
                k
            )
                .prop_map(|(rank_div, rank, k)| ModuleSpec::Lpr { rank_div, rank, k }),
            Just(ModuleSpec::MaxPool),
        ]
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(
            c in 1usize..8, hw in 32usize..64,
            body in proptest::collection::vec(module_strategy(), 0..6),
            head in proptest::option::of(1usize..20),
            rank_div in 1usize..20,
            width in (1u64..8, 1u64..8),
        ) {
            let mut modules = body;
            modules.push(ModuleSpec::AvgPool);
            if let Some(out) = head {
                modules.push(ModuleSpec::Fc { out });
            }
            let spec = ArchitectureSpec::new(FeatureShape::new(c, hw, hw), modules)
                .with_rank_div(rank_div)
                .with_width(WidthMult::new(width.0, width.1).unwrap());
            prop_assume!(spec.resolve().is_ok());
            let text = spec.render();
            prop_assert_eq!(parse_arch(&text).unwrap(), spec);
        }
    }
}
