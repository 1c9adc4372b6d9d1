//! Exact multiply-accumulate and weight counts.
//!
//! One FLOP is one multiply-accumulate. Counts are integers end to end; the
//! rational factors of the closed forms are expanded before evaluation.
//! Batch-norm parameters are reported separately in `bn_params` and never
//! included in `params`.

use std::fmt::Write as _;

use crate::arch::{ArchitectureSpec, FeatureShape, ModuleSpec, ResolvedModule};
use crate::error::{Error, Result};

/// Block families of the closed-form comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    SConv,
    Dsc,
    Mobilev2,
    Shufflev2,
    Lpr,
}

impl BlockKind {
    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::SConv => "SConv",
            BlockKind::Dsc => "DSC",
            BlockKind::Mobilev2 => "Mobilev2",
            BlockKind::Shufflev2 => "Shufflev2",
            BlockKind::Lpr => "LPR",
        }
    }
}

/// Block-specific extra parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extra {
    None,
    /// LPR inner rank.
    Rank(u64),
    /// Mobilev2 expansion factor.
    Expansion(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub layer_name: String,
    pub kind: &'static str,
    pub in_shape: FeatureShape,
    pub out_shape: FeatureShape,
    pub flops: u64,
    pub params: u64,
    pub bn_params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub total_flops: u64,
    pub total_params: u64,
    pub total_bn_params: u64,
}

impl CostReport {
    pub fn from_entries(entries: Vec<CostEntry>) -> Self {
        Self {
            total_flops: entries.iter().map(|e| e.flops).sum(),
            total_params: entries.iter().map(|e| e.params).sum(),
            total_bn_params: entries.iter().map(|e| e.bn_params).sum(),
            entries,
        }
    }

    /// Tab-separated table with a trailing `TOTAL` row. With `include_bn`
    /// an extra `bn_params` column is appended.
    pub fn to_tsv(&self, include_bn: bool) -> String {
        let mut s = String::from("layer\tkind\tin_shape\tout_shape\tflops\tparams");
        if include_bn {
            s.push_str("\tbn_params");
        }
        s.push('\n');
        for e in &self.entries {
            let _ = write!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.layer_name, e.kind, e.in_shape, e.out_shape, e.flops, e.params
            );
            if include_bn {
                let _ = write!(s, "\t{}", e.bn_params);
            }
            s.push('\n');
        }
        let _ = write!(
            s,
            "TOTAL\t\t\t\t{}\t{}",
            self.total_flops, self.total_params
        );
        if include_bn {
            let _ = write!(s, "\t{}", self.total_bn_params);
        }
        s.push('\n');
        s
    }
}

/// `(flops, params)` of one closed-form block at `spatial` output positions.
fn block_counts(
    kind: BlockKind,
    spatial: u64,
    s_k: u64,
    c_in: u64,
    c_out: u64,
    extra: Extra,
) -> Result<(u64, u64)> {
    let k2 = s_k * s_k;
    Ok(match kind {
        BlockKind::SConv => (k2 * spatial * c_in * c_out, k2 * c_in * c_out),
        BlockKind::Dsc => (
            k2 * spatial * c_in + spatial * c_in * c_out,
            k2 * c_in + c_in * c_out,
        ),
        BlockKind::Shufflev2 => {
            let (f, p) = block_counts(BlockKind::Dsc, spatial, s_k, c_in, c_out, extra)?;
            (f / 2, p / 2)
        }
        BlockKind::Mobilev2 => {
            let Extra::Expansion(e) = extra else {
                return Err(Error::Config("Mobilev2 needs an expansion factor".into()));
            };
            (
                e * k2 * spatial * c_in + (e + 1) * spatial * c_in * c_out,
                e * k2 * c_in + (e + 1) * c_in * c_out,
            )
        }
        BlockKind::Lpr => {
            let Extra::Rank(r) = extra else {
                return Err(Error::Config("LPR needs a rank".into()));
            };
            if c_in != c_out {
                return Err(Error::Config(
                    "LPR requires identical input-output dimension".into(),
                ));
            }
            if r == 0 {
                return Err(Error::Config("LPR rank must be positive".into()));
            }
            (
                k2 * spatial * c_in + 2 * spatial * c_in * r,
                k2 * c_in + 2 * c_in * r,
            )
        }
    })
}

/// Cost of one block on an `s_f x s_f` map with an `s_k x s_k` kernel.
pub fn cost_module(
    kind: BlockKind,
    s_f: u64,
    s_k: u64,
    c_in: u64,
    c_out: u64,
    extra: Extra,
) -> Result<CostEntry> {
    if s_f == 0 || s_k == 0 || c_in == 0 || c_out == 0 {
        return Err(Error::Config("all dimensions must be positive".into()));
    }
    let (flops, params) = block_counts(kind, s_f * s_f, s_k, c_in, c_out, extra)?;
    let side = s_f as usize;
    Ok(CostEntry {
        layer_name: kind.name().to_string(),
        kind: kind.name(),
        in_shape: FeatureShape::new(c_in as usize, side, side),
        out_shape: FeatureShape::new(c_out as usize, side, side),
        flops,
        params,
        bn_params: 0,
    })
}

/// True iff an LPR block of width `m` and rank `r` is strictly cheaper than
/// the Shufflev2 block of the same width, in both FLOPs and parameters.
pub fn cheaper_than_shufflev2(m: u64, r: u64, s_k: u64) -> bool {
    4 * r + s_k * s_k < m
}

/// Per-module costs of a spec at its declared input size.
pub fn cost_network(spec: &ArchitectureSpec) -> Result<CostReport> {
    let entries = spec
        .resolve()?
        .iter()
        .map(module_cost)
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::from_entries(entries))
}

fn module_cost(m: &ResolvedModule) -> Result<CostEntry> {
    let (c_in, c_out) = (m.input.c as u64, m.output.c as u64);
    let s_in = m.input.spatial() as u64;
    let s_out = m.output.spatial() as u64;
    let (flops, params, bn) = match m.spec {
        ModuleSpec::Conv { k, .. } => {
            let (f, p) = block_counts(BlockKind::SConv, s_out, k as u64, c_in, c_out, Extra::None)?;
            (f, p, 2 * c_out)
        }
        ModuleSpec::DepthwiseConv { k, .. } => {
            let k2 = (k * k) as u64;
            (k2 * s_out * c_in, k2 * c_in, 2 * c_in)
        }
        ModuleSpec::Pointwise { .. } => (s_out * c_in * c_out, c_in * c_out, 2 * c_out),
        ModuleSpec::Dsc { k, .. } => {
            let (f, p) = block_counts(BlockKind::Dsc, s_out, k as u64, c_in, c_out, Extra::None)?;
            (f, p, 2 * c_in + 2 * c_out)
        }
        ModuleSpec::DscDown { .. } => {
            let (f, p) = block_counts(BlockKind::Dsc, s_out, 3, c_in, c_out, Extra::None)?;
            (f, p, 2 * c_in + 2 * c_out)
        }
        ModuleSpec::ShuffleDown { .. } => {
            let h = c_out / 2;
            // left: dw(c_in, s2), pw(c_in -> h); right: pw(c_in -> h) at input
            // resolution, dw(h, s2), pw(h -> h)
            let flops = 9 * s_out * c_in
                + s_out * c_in * h
                + s_in * c_in * h
                + 9 * s_out * h
                + s_out * h * h;
            let params = 9 * c_in + c_in * h + c_in * h + 9 * h + h * h;
            (flops, params, 2 * c_in + 8 * h)
        }
        ModuleSpec::Lpr { k, .. } => {
            let r = m
                .rank
                .ok_or_else(|| Error::Config(format!("{}: unresolved rank", m.name)))?;
            let (f, p) = block_counts(
                BlockKind::Lpr,
                s_out,
                k as u64,
                c_in,
                c_out,
                Extra::Rank(r as u64),
            )?;
            (f, p, 2 * c_in)
        }
        ModuleSpec::AvgPool | ModuleSpec::MaxPool => (0, 0, 0),
        ModuleSpec::Fc { out } => {
            let n = m.input.numel() as u64 * out as u64;
            (n, n, 0)
        }
    };
    Ok(CostEntry {
        layer_name: m.name.clone(),
        kind: m.spec.keyword(),
        in_shape: m.input,
        out_shape: m.output,
        flops,
        params,
        bn_params: bn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lpr_full_rank_exceeds_dsc() {
        let c = 64;
        let lpr = cost_module(BlockKind::Lpr, 14, 3, c, c, Extra::Rank(c)).unwrap();
        let dsc = cost_module(BlockKind::Dsc, 14, 3, c, c, Extra::None).unwrap();
        assert_eq!(lpr.params, 9 * c + 2 * c * c);
        assert!(lpr.params > dsc.params);
    }

    #[test]
    fn missing_extras() {
        assert!(matches!(
            cost_module(BlockKind::Lpr, 14, 3, 8, 8, Extra::None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cost_module(BlockKind::Mobilev2, 14, 3, 8, 8, Extra::Rank(2)),
            Err(Error::Config(_))
        ));
        assert!(cost_module(BlockKind::Lpr, 14, 3, 8, 16, Extra::Rank(2)).is_err());
        assert!(cost_module(BlockKind::Dsc, 0, 3, 8, 8, Extra::None).is_err());
    }

    #[test]
    fn condition_examples() {
        assert!(cheaper_than_shufflev2(256, 32, 3));
        assert!(!cheaper_than_shufflev2(64, 16, 3));
        // boundary 4r == m - k^2: m = 9 + 4*10 = 49
        assert!(!cheaper_than_shufflev2(49, 10, 3));
        let l = cost_module(BlockKind::Lpr, 7, 3, 49, 49, Extra::Rank(10)).unwrap();
        let s = cost_module(BlockKind::Shufflev2, 7, 3, 49, 49, Extra::None).unwrap();
        // DSC params 9*49 + 49*49 = 2842 is even, so the half is exact
        assert_eq!(l.params, s.params);
    }

    #[test]
    fn lpr_monotone_in_rank() {
        let mut prev = (0, 0);
        for r in 1..=64 {
            let e = cost_module(BlockKind::Lpr, 7, 3, 64, 64, Extra::Rank(r)).unwrap();
            assert!(e.flops > prev.0 && e.params > prev.1);
            prev = (e.flops, e.params);
        }
    }

    #[test]
    fn tsv_layout() {
        let spec = crate::arch::parse_arch("input 256 14 14\nlpr r=32").unwrap();
        let tsv = cost_network(&spec).unwrap().to_tsv(false);
        assert_eq!(
            tsv,
            "layer\tkind\tin_shape\tout_shape\tflops\tparams\n\
             00_lpr\tlpr\t256x14x14\t256x14x14\t3662848\t18688\n\
             TOTAL\t\t\t\t3662848\t18688\n"
        );
    }
}
