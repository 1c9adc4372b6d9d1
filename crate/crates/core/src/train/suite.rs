use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::parse_arch;
use crate::error::{Error, Result};
use crate::layers::{
    AvgPool, BatchNorm, ChannelShuffle, Conv2d, Dsc, FullyConnected, L2ChannelNorm, Layer, Lpr,
    LprHyper, MaxPool, Mode, Relu, ShuffleDown,
};
use crate::network::Network;
use crate::tensor::{Shape4, Tensor4};

use super::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};

/// Case names accepted by [`gradcheck_suite`], in run order.
pub const GRADCHECK_CASES: &[&str] = &[
    "conv",
    "conv_s2",
    "depthwise",
    "pointwise",
    "dsc",
    "lpr",
    "lpr_no_residual",
    "lpr_no_l2norm",
    "batchnorm",
    "l2norm",
    "relu",
    "avgpool",
    "maxpool",
    "fc",
    "channel_shuffle",
    "shuffle_down",
    "network",
];

const NETWORK_ARCH: &str = "\
input 4 8 8
conv out=8 k=3 s=1
lpr r=2
dsc out=12 k=3 s=2
lpr r=3
avgpool
fc out=3
";

fn case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Box<dyn Layer<f64>>, Shape4)> {
    let x = Shape4::new(2, 4, 5, 5);
    let lpr = |rng: &mut ChaCha8Rng, residual: bool, l2norm: bool| -> Result<Box<dyn Layer<f64>>> {
        let hyper = LprHyper::new(6).rank(2).residual(residual).l2norm(l2norm);
        Ok(Box::new(Lpr::new(hyper, rng)?))
    };
    let lpr_in = Shape4::new(2, 6, 5, 5);
    Ok(match name {
        "conv" => (Box::new(Conv2d::standard(4, 3, 3, 1, rng)), x),
        "conv_s2" => (Box::new(Conv2d::standard(4, 3, 3, 2, rng)), x),
        "depthwise" => (Box::new(Conv2d::depthwise(4, 3, 1, rng)), x),
        "pointwise" => (Box::new(Conv2d::pointwise(4, 5, rng)), x),
        "dsc" => (Box::new(Dsc::new(4, 6, 3, 2, rng)), x),
        "lpr" => (lpr(rng, true, true)?, lpr_in),
        "lpr_no_residual" => (lpr(rng, false, true)?, lpr_in),
        "lpr_no_l2norm" => (lpr(rng, true, false)?, lpr_in),
        "batchnorm" => (Box::new(BatchNorm::new(4)), x),
        "l2norm" => (Box::new(L2ChannelNorm::new()), x),
        "relu" => (Box::new(Relu::new()), x),
        "avgpool" => (Box::new(AvgPool::new()), x),
        "maxpool" => (Box::new(MaxPool::new(3, 2, 1)), x),
        "fc" => (Box::new(FullyConnected::new(4 * 5 * 5, 3, rng)), x),
        "channel_shuffle" => (Box::new(ChannelShuffle::new(2)), x),
        "shuffle_down" => (Box::new(ShuffleDown::new(4, 8, 3, rng)?), x),
        "network" => {
            let spec = parse_arch(NETWORK_ARCH)?;
            let net = Network::<f64>::from_spec(&spec, rand::Rng::random(rng))?;
            let shape = net.input_shape(2);
            (Box::new(net), shape)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown gradcheck case {other:?} (expected one of {} or all)",
                GRADCHECK_CASES.join(", ")
            )))
        }
    })
}

/// Runs the float64 finite-difference check for `which` (a case name or
/// `"all"`), each case with its own seeded layer, input and probe.
pub fn gradcheck_suite(
    which: &str,
    opts: &GradCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>> {
    let names: Vec<&str> = if which == "all" {
        GRADCHECK_CASES.to_vec()
    } else {
        vec![which]
    };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let index = GRADCHECK_CASES.iter().position(|c| *c == name).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(index as u64));
        let (mut layer, shape) = case(name, &mut rng)?;
        let x = Tensor4::randn(shape, 1.0, &mut rng);
        // Under batch statistics the shuffle unit's pre-pointwise BN shifts are
        // cancelled by the following BN, so their true gradient is exactly zero
        // and only finite-difference noise would be compared.
        let case_opts = if name == "shuffle_down" {
            GradCheckOptions {
                mode: Mode::Infer,
                ..opts.clone()
            }
        } else {
            opts.clone()
        };
        let report = grad_check(layer.as_mut(), &x, &case_opts)?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_case_is_rejected() {
        let err = gradcheck_suite("nope", &GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains("unknown gradcheck case"));
    }

    #[test]
    fn lpr_case_passes() {
        let r = gradcheck_suite("lpr", &GradCheckOptions::default()).unwrap();
        assert!(r[0].1.pass, "{}", r[0].1.to_tsv());
    }
}
