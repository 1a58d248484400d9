use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flops;
use crate::nn::{Builder, Chw, ConvUnit, ForwardCtx, NormUnit, ParamId, Seq, Step};
use crate::tensor::{ConvGeom, PoolGeom, PoolKind, Real, Tensor, Var};

/// The eight candidate operations an edge can choose from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CandidateOp {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "zero")]
    Zero,
}

impl CandidateOp {
    pub const COUNT: usize = 8;

    pub const ALL: [CandidateOp; Self::COUNT] = [
        CandidateOp::SepConv3x3,
        CandidateOp::SepConv5x5,
        CandidateOp::DilConv3x3,
        CandidateOp::DilConv5x5,
        CandidateOp::MaxPool3x3,
        CandidateOp::AvgPool3x3,
        CandidateOp::SkipConnect,
        CandidateOp::Zero,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CandidateOp::SepConv3x3 => "sep_conv_3x3",
            CandidateOp::SepConv5x5 => "sep_conv_5x5",
            CandidateOp::DilConv3x3 => "dil_conv_3x3",
            CandidateOp::DilConv5x5 => "dil_conv_5x5",
            CandidateOp::MaxPool3x3 => "max_pool_3x3",
            CandidateOp::AvgPool3x3 => "avg_pool_3x3",
            CandidateOp::SkipConnect => "skip_connect",
            CandidateOp::Zero => "zero",
        }
    }

    /// Instantiates the op for `channels` in and out. Relaxed (search-time)
    /// ops use norms without learnable affine terms and append a norm to the
    /// pooling ops.
    pub fn build<T: Real>(
        self,
        b: &mut Builder<'_, T>,
        channels: usize,
        stride: usize,
        relaxed: bool,
    ) -> OpModule {
        let c = channels;
        let affine = !relaxed;
        let pool = |kind| Step::Pool(kind, PoolGeom { kernel: 3, stride, padding: 1 });
        b.push(self.name());
        let module = match self {
            CandidateOp::SepConv3x3 | CandidateOp::SepConv5x5 => {
                let k = if self == CandidateOp::SepConv3x3 { 3 } else { 5 };
                let pad = k / 2;
                let mut steps = Vec::new();
                for (i, s) in [(0, stride), (1, 1)] {
                    steps.push(Step::Relu);
                    steps.push(Step::Conv(b.conv(&format!("dw{i}"), c, c, k, ConvGeom::new(s, pad, 1, c))));
                    steps.push(Step::Conv(b.conv(&format!("pw{i}"), c, c, 1, ConvGeom::plain(1, 0))));
                    steps.push(Step::Norm(b.norm(&format!("norm{i}"), c, affine)));
                }
                OpModule::Seq(Seq::new(steps))
            }
            CandidateOp::DilConv3x3 | CandidateOp::DilConv5x5 => {
                let k = if self == CandidateOp::DilConv3x3 { 3 } else { 5 };
                let pad = k - 1;
                OpModule::Seq(Seq::new(vec![
                    Step::Relu,
                    Step::Conv(b.conv("dw", c, c, k, ConvGeom::new(stride, pad, 2, c))),
                    Step::Conv(b.conv("pw", c, c, 1, ConvGeom::plain(1, 0))),
                    Step::Norm(b.norm("norm", c, affine)),
                ]))
            }
            CandidateOp::MaxPool3x3 | CandidateOp::AvgPool3x3 => {
                let kind = if self == CandidateOp::MaxPool3x3 { PoolKind::Max } else { PoolKind::Avg };
                let mut steps = vec![pool(kind)];
                if relaxed {
                    steps.push(Step::Norm(b.norm("norm", c, false)));
                }
                OpModule::Seq(Seq::new(steps))
            }
            CandidateOp::SkipConnect if stride == 1 => OpModule::Identity,
            CandidateOp::SkipConnect => {
                let half = c / 2;
                OpModule::FactorizedReduce {
                    a: b.conv("conv_a", c, half, 1, ConvGeom::plain(stride, 0)),
                    b: b.conv("conv_b", c, c - half, 1, ConvGeom::plain(stride, 0)),
                    norm: b.norm("norm", c, affine),
                }
            }
            CandidateOp::Zero => OpModule::Zero { stride },
        };
        b.pop();
        module
    }
}

impl fmt::Display for CandidateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CandidateOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown operation `{s}`")))
    }
}

/// An instantiated candidate operation.
#[derive(Clone, Debug)]
pub enum OpModule {
    Zero { stride: usize },
    Identity,
    Seq(Seq),
    /// Stride-2 skip: two offset 1×1 strided convs, concatenated and normalized.
    FactorizedReduce { a: ConvUnit, b: ConvUnit, norm: NormUnit },
}

impl OpModule {
    pub fn is_zero(&self) -> bool {
        matches!(self, OpModule::Zero { .. })
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        match self {
            OpModule::Zero { stride } => {
                let [n, c, h, w] = ctx.g.value(x).nchw()?;
                let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                Ok(ctx.g.constant(Tensor::zeros(&[n, c, oh, ow])))
            }
            OpModule::Identity => Ok(x),
            OpModule::Seq(seq) => seq.forward(ctx, x),
            OpModule::FactorizedReduce { a, b, norm } => {
                let [_, _, h, w] = ctx.g.value(x).nchw()?;
                if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                    return Err(shape_err(format!("strided skip needs even spatial extents, got {h}x{w}")));
                }
                let r = ctx.g.relu(x)?;
                let ya = a.forward(ctx, r)?;
                let shifted = ctx.g.crop(r, 1, 1, h - 1, w - 1)?;
                let yb = b.forward(ctx, shifted)?;
                let cat = ctx.g.concat_channels(&[ya, yb])?;
                norm.forward(ctx, cat)
            }
        }
    }

    /// Closed-form per-sample cost and output shape.
    pub fn cost(&self, shape: Chw) -> Result<(u64, Chw)> {
        let [c, h, w] = shape;
        match self {
            OpModule::Zero { stride } => Ok((0, [c, (h - 1) / stride + 1, (w - 1) / stride + 1])),
            OpModule::Identity => Ok((0, shape)),
            OpModule::Seq(seq) => seq.cost(shape),
            OpModule::FactorizedReduce { a, b, .. } => {
                let relu = flops::elementwise(shape);
                let (ma, [ca, oh, ow]) = a.cost(shape)?;
                let (mb, [cb, ..]) = b.cost([c, h - 1, w - 1])?;
                let out = [ca + cb, oh, ow];
                Ok((relu + ma + mb + flops::elementwise(out), out))
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            OpModule::Zero { .. } | OpModule::Identity => Vec::new(),
            OpModule::Seq(seq) => seq.params(),
            OpModule::FactorizedReduce { a, b, norm } => {
                let mut v = vec![a.weight, b.weight];
                v.extend(norm.params());
                v
            }
        }
    }
}
