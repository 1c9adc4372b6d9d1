//! The distillation study and the block ablation harness.
//!
//! Distillation fits student blocks to a frozen depthwise separable target
//! whose pointwise matrix is `I + U V^T` (rank-`r` perturbation of the
//! identity), then compares held-out output MSE per student variant.
//!
//! The ablation trains one small network per block variant on identical data
//! and seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{ArchitectureSpec, FeatureShape, ModuleSpec};
use crate::conv::{conv2d_fast, ConvParams};
use crate::error::{Error, Result};
use crate::layers::{xavier_uniform, BatchNorm, Conv2d, Dsc, Layer, Lpr, LprHyper, Mode};
use crate::network::{BuildOptions, Network};
use crate::tensor::{Shape4, Tensor4};
use crate::train::{
    batch_stat_loss, cosine_lr, l2_loss, synthetic_blobs, train, Dataset, EpochStats, Optimizer,
    OptimizerChoice, OptimizerKind, Schedule, TrainConfig,
};

/// How the student's low-rank factors start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorInit {
    /// Xavier, scaled by `1/sqrt(r)`.
    Xavier,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub channels: usize,
    /// Student rank.
    pub rank: usize,
    /// Rank of the target's perturbation; defaults to `rank`. Zero gives the
    /// pure identity target.
    pub target_rank: Option<usize>,
    /// Multiplier on the perturbation `U V^T` (entries of `U`, `V` are
    /// `N(0, 1/m)`).
    pub perturbation: f64,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub spatial: usize,
    pub factor_init: FactorInit,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            rank: 8,
            target_rank: None,
            perturbation: 1.0,
            steps: 2000,
            seed: 0,
            lr: 1e-2,
            train_samples: 8,
            eval_samples: 8,
            spatial: 8,
            factor_init: FactorInit::Xavier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillVariant {
    LprFull,
    LprNoResidual,
    LprNoL2Norm,
    DscRefit,
}

impl DistillVariant {
    pub const ALL: [DistillVariant; 4] = [
        DistillVariant::LprFull,
        DistillVariant::LprNoResidual,
        DistillVariant::LprNoL2Norm,
        DistillVariant::DscRefit,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DistillVariant::LprFull => "lpr_full",
            DistillVariant::LprNoResidual => "lpr_no_residual",
            DistillVariant::LprNoL2Norm => "lpr_no_l2norm",
            DistillVariant::DscRefit => "dsc_refit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub lpr_full: f64,
    pub lpr_no_residual: f64,
    pub lpr_no_l2norm: f64,
    pub dsc_refit: f64,
}

impl DistillReport {
    pub fn get(&self, v: DistillVariant) -> f64 {
        match v {
            DistillVariant::LprFull => self.lpr_full,
            DistillVariant::LprNoResidual => self.lpr_no_residual,
            DistillVariant::LprNoL2Norm => self.lpr_no_l2norm,
            DistillVariant::DscRefit => self.dsc_refit,
        }
    }

    /// `MSE(no residual) / MSE(full)`; infinite when the full fit is exact.
    pub fn ratio(&self) -> f64 {
        self.lpr_no_residual / self.lpr_full
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tmse\n");
        for v in DistillVariant::ALL {
            s.push_str(&format!("{}\t{:.6e}\n", v.name(), self.get(v)));
        }
        s.push_str(&format!(
            "ratio_no_residual_over_full\t{:.4}\n",
            self.ratio()
        ));
        s
    }
}

/// The frozen target and its data.
pub struct DistillProblem {
    pub depthwise: Tensor4<f64>,
    /// `(m, m, 1, 1)` pointwise weight `I + U V^T`.
    pub pointwise: Tensor4<f64>,
    pub train_x: Tensor4<f64>,
    pub train_y: Tensor4<f64>,
    pub eval_x: Tensor4<f64>,
    pub eval_y: Tensor4<f64>,
}

impl DistillProblem {
    pub fn new(cfg: &DistillConfig) -> Result<Self> {
        let m = cfg.channels;
        let target_rank = cfg.target_rank.unwrap_or(cfg.rank);
        if m == 0 || cfg.rank == 0 || cfg.rank > m || target_rank > m {
            return Err(Error::Config(format!(
                "distillation needs 1 <= r <= m and target rank <= m (m={m}, r={}, target rank={target_rank})",
                cfg.rank
            )));
        }
        if cfg.train_samples == 0 || cfg.eval_samples == 0 || cfg.spatial == 0 {
            return Err(Error::Config(
                "distillation needs samples and a spatial size".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let depthwise = xavier_uniform::<f64, _>(Shape4::new(m, 1, 3, 3), &mut rng);
        let n = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("valid std");
        let u: Vec<f64> = (0..m * target_rank).map(|_| n.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..m * target_rank).map(|_| n.sample(&mut rng)).collect();
        let pointwise = Tensor4::from_fn(Shape4::new(m, m, 1, 1), |i, j, _, _| {
            let low: f64 = (0..target_rank)
                .map(|k| u[i * target_rank + k] * v[j * target_rank + k])
                .sum();
            f64::from(u8::from(i == j)) + cfg.perturbation * low
        });
        let s = cfg.spatial;
        let train_x = Tensor4::randn(Shape4::new(cfg.train_samples, m, s, s), 1.0, &mut rng);
        let eval_x = Tensor4::randn(Shape4::new(cfg.eval_samples, m, s, s), 1.0, &mut rng);
        let mut p = Self {
            depthwise,
            pointwise,
            train_y: Tensor4::zeros(train_x.shape()),
            eval_y: Tensor4::zeros(eval_x.shape()),
            train_x,
            eval_x,
        };
        p.train_y = p.target(&p.train_x)?;
        p.eval_y = p.target(&p.eval_x)?;
        Ok(p)
    }

    pub fn target(&self, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        let m = x.shape().c;
        let d = conv2d_fast(x, &self.depthwise, ConvParams::new(1, 1, m))?;
        conv2d_fast(&d, &self.pointwise, ConvParams::default())
    }

    fn student(
        &self,
        variant: DistillVariant,
        cfg: &DistillConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn Layer<f64>>> {
        let m = cfg.channels;
        if variant == DistillVariant::DscRefit {
            let dw = Conv2d::depthwise_from(self.depthwise.clone(), 1)?;
            let pw = Conv2d::pointwise(m, m, rng);
            return Ok(Box::new(Dsc::from_parts(dw, pw)?));
        }
        let hyper = LprHyper::new(m)
            .rank(cfg.rank)
            .residual(variant != DistillVariant::LprNoResidual)
            .l2norm(variant != DistillVariant::LprNoL2Norm)
            .relu(false);
        let fresh = Lpr::<f64>::new(hyper, rng)?;
        let (mut p1, mut p2) = (fresh.p1.weight().clone(), fresh.p2.weight().clone());
        if cfg.factor_init == FactorInit::Zero {
            p1.fill(0.0);
            p2.fill(0.0);
        }
        Ok(Box::new(Lpr::from_weights(
            hyper,
            self.depthwise.clone(),
            p1,
            p2,
            BatchNorm::identity(m),
        )?))
    }

    /// Fits one student by full-batch Adam with cosine decay; returns the
    /// held-out MSE.
    pub fn fit(&self, variant: DistillVariant, cfg: &DistillConfig) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_0000_0001);
        let mut student = self.student(variant, cfg, &mut rng)?;
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        for step in 0..cfg.steps {
            student.zero_grad();
            let y = student.forward(&self.train_x, Mode::Infer)?;
            let (loss, grad) = l2_loss(&y, &self.train_y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    tensor: variant.name().into(),
                    detail: format!("distillation diverged at step {step}"),
                });
            }
            student.backward(&grad)?;
            opt.step(student.as_mut(), cosine_lr(step, cfg.steps, cfg.lr)?)?;
        }
        let (mse, _) = l2_loss(&student.infer(&self.eval_x)?, &self.eval_y)?;
        if !mse.is_finite() {
            return Err(Error::Numeric {
                tensor: variant.name().into(),
                detail: "non-finite evaluation MSE".into(),
            });
        }
        Ok(mse)
    }
}

/// Fits all four variants (in parallel) and reports their held-out MSEs.
pub fn distill(cfg: &DistillConfig) -> Result<DistillReport> {
    let problem = DistillProblem::new(cfg)?;
    let results: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = DistillVariant::ALL
            .iter()
            .map(|&v| {
                let problem = &problem;
                s.spawn(move || problem.fit(v, cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("distillation worker panicked"))
            .collect()
    });
    let mut it = results.into_iter();
    let mut next = || it.next().expect("one result per variant");
    Ok(DistillReport {
        lpr_full: next()?,
        lpr_no_residual: next()?,
        lpr_no_l2norm: next()?,
        dsc_refit: next()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoResidual,
    NoL2Norm,
    Dsc,
    SConv,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoResidual,
        AblationVariant::NoL2Norm,
        AblationVariant::Dsc,
        AblationVariant::SConv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoResidual => "no-residual",
            AblationVariant::NoL2Norm => "no-l2norm",
            AblationVariant::Dsc => "dsc",
            AblationVariant::SConv => "sconv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }

    fn build_options(&self) -> BuildOptions {
        BuildOptions {
            lpr_residual: *self != AblationVariant::NoResidual,
            lpr_l2norm: *self != AblationVariant::NoL2Norm,
            lpr_relu: true,
        }
    }
}

pub const TOY_WIDTH: usize = 16;
pub const TOY_BLOCKS: usize = 4;

/// Stride-2 stem convolution to [`TOY_WIDTH`] channels, [`TOY_BLOCKS`]
/// blocks of the chosen variant, global average pooling and a classifier.
pub fn toy_spec(variant: AblationVariant, input: FeatureShape, classes: usize) -> ArchitectureSpec {
    let block = match variant {
        AblationVariant::Full | AblationVariant::NoResidual | AblationVariant::NoL2Norm => {
            ModuleSpec::Lpr {
                rank_div: None,
                rank: None,
                k: 3,
            }
        }
        AblationVariant::Dsc => ModuleSpec::Dsc {
            out: TOY_WIDTH,
            k: 3,
            stride: 1,
        },
        AblationVariant::SConv => ModuleSpec::Conv {
            out: TOY_WIDTH,
            k: 3,
            stride: 1,
        },
    };
    let mut modules = vec![ModuleSpec::Conv {
        out: TOY_WIDTH,
        k: 3,
        stride: 2,
    }];
    modules.extend(std::iter::repeat_n(block, TOY_BLOCKS));
    modules.extend([ModuleSpec::AvgPool, ModuleSpec::Fc { out: classes }]);
    ArchitectureSpec::new(input, modules)
}

pub fn toy_network(
    variant: AblationVariant,
    input: FeatureShape,
    classes: usize,
    seed: u64,
) -> Result<Network<f32>> {
    Network::with_options(
        &toy_spec(variant, input, classes),
        seed,
        variant.build_options(),
    )
}

/// Synthetic task used by the ablation and the training checks: 10-class
/// 16x16 blobs.
pub fn synthetic_task(
    train: usize,
    eval: usize,
    seed: u64,
) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let all = synthetic_blobs::<f32>(train + eval, 10, 16, seed)?;
    all.split_tail(eval)
}

/// SGD with momentum and cosine decay; the rate is 0.5 at batch 256 scaled
/// linearly to batch 32.
pub fn ablation_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerChoice::SgdMomentum,
        lr0: 0.5 * 32.0 / 256.0,
        schedule: Schedule::Cosine,
        epochs,
        batch_size: 32,
        momentum: 0.9,
        seed,
        augment: false,
        fine_tune: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: AblationVariant,
    pub num_weights: usize,
    /// Loss with per-batch statistics before any update.
    pub initial_loss: f64,
    /// Same measurement after training.
    pub final_loss: f64,
    pub history: Vec<EpochStats>,
}

impl AblationRun {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", EpochStats::TSV_HEADER);
        for e in &self.history {
            s.push_str(&e.tsv_row());
            s.push('\n');
        }
        s
    }
}

/// Trains the toy network for one variant. With `cfg.epochs == 0` nothing is
/// trained and the history is empty.
pub fn ablate(
    variant: AblationVariant,
    train_set: &Dataset<f32>,
    eval_set: Option<&Dataset<f32>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<AblationRun> {
    let s = train_set.sample_shape();
    let input = FeatureShape::new(s.c, s.h, s.w);
    let mut net = toy_network(variant, input, train_set.classes, cfg.seed)?;
    let initial_loss = batch_stat_loss(&mut net, train_set, cfg.batch_size.max(1))?;
    let history = if cfg.epochs == 0 {
        Vec::new()
    } else {
        train(&mut net, train_set, eval_set, cfg, &mut on_epoch)?
    };
    let final_loss = batch_stat_loss(&mut net, train_set, cfg.batch_size.max(1))?;
    Ok(AblationRun {
        variant,
        num_weights: net.num_weights(),
        initial_loss,
        final_loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_is_identity_plus_low_rank() {
        let cfg = DistillConfig {
            channels: 8,
            rank: 2,
            ..Default::default()
        };
        let p = DistillProblem::new(&cfg).unwrap();
        let mut a = p.pointwise.data().to_vec();
        for i in 0..8 {
            a[i * 8 + i] -= 1.0;
        }
        // a rank-2 matrix has vanishing 3x3 minors
        let det3 = |r: [usize; 3], c: [usize; 3]| {
            let g = |i: usize, j: usize| a[r[i] * 8 + c[j]];
            g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1))
                - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
                + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0))
        };
        assert!(det3([0, 3, 5], [1, 2, 7]).abs() < 1e-12);
        assert!(a.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn rejects_rank_above_channels() {
        let cfg = DistillConfig {
            channels: 4,
            rank: 5,
            ..Default::default()
        };
        assert!(DistillProblem::new(&cfg).is_err());
    }

    #[test]
    fn toy_variants_param_order() {
        let input = FeatureShape::new(1, 16, 16);
        let w = |v| toy_network(v, input, 10, 0).unwrap().num_weights();
        assert!(w(AblationVariant::Dsc) > w(AblationVariant::Full));
        assert!(w(AblationVariant::SConv) > w(AblationVariant::Dsc));
        assert_eq!(w(AblationVariant::Full), w(AblationVariant::NoResidual));
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in AblationVariant::ALL {
            assert_eq!(AblationVariant::parse(v.name()).unwrap(), v);
        }
        assert!(AblationVariant::parse("nope").is_err());
    }
}
