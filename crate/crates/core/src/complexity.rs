//! Closed-form parameter and FLOPs accounting.
//!
//! One multiply-accumulate counts as one FLOP. A convolution costs
//! `H_out * W_out * C_out * k^2 * C_in / groups`; SE gates and the linear head
//! are included, normalization, activation and pooling are not.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::{Num, NumCast};
use serde::{Deserialize, Serialize};

use crate::arch::{ActivationOrder, BlockSpec, NetworkSpec, SeVariant, Topology};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
    /// `[C, H, W]`.
    pub out_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_params: u64,
    pub total_flops: u64,
    pub resolution: usize,
    pub per_layer: Vec<LayerCost>,
}

trait CostNum: Num + NumCast + Copy + PartialOrd {
    fn of(v: usize) -> Self {
        <Self as NumCast>::from(v).expect("in range")
    }
}

impl CostNum for u64 {}
impl CostNum for f64 {}

fn out_size(h: usize, stride: usize) -> usize {
    (h - 1) / stride + 1
}

/// Parameters and FLOPs of one (grouped) convolution without bias.
pub fn conv_cost(cin: u64, cout: u64, kernel: u64, groups: u64, out_h: u64, out_w: u64) -> (u64, u64) {
    let p = kernel * kernel * cin / groups * cout;
    (p, p * out_h * out_w)
}

fn conv<N: CostNum>(cin: N, cout: N, k: usize, groups: usize, ho: usize) -> (N, N) {
    let p = N::of(k * k) * cin / N::of(groups) * cout;
    (p, p * N::of(ho * ho))
}

fn norm<N: CostNum>(c: N) -> (N, N) {
    (N::of(2) * c, N::zero())
}

fn se_cost<N: CostNum>(c: N, reduction: usize) -> (N, N) {
    let mut hidden = c / N::of(reduction.max(1));
    if hidden < N::one() {
        hidden = N::one();
    }
    let w = N::of(2) * c * hidden;
    (w + hidden + c, w)
}

/// Emits `(part, params, flops, out_channels, out_h)` for one block.
fn block_costs<N: CostNum>(
    b: &BlockSpec,
    cin: N,
    cout: N,
    stride: usize,
    h: usize,
    emit: &mut impl FnMut(&'static str, (N, N), N, usize),
) {
    let pre = b.activation_order == ActivationOrder::Pre;
    let k = b.kernel_size;
    let ho = out_size(h, stride);
    let (reduce, spatial) = match b.topology {
        Topology::Basic => (cout, cout),
        Topology::Bottleneck => (cout / N::of(2), cout / N::of(2)),
        Topology::InvertedBottleneck => (N::of(4) * cout, N::of(4) * cout),
    };
    let spatial_conv = |emit: &mut dyn FnMut(&'static str, (N, N), N, usize), s: usize, hin: usize| {
        let hout = out_size(hin, s);
        if b.scales <= 1 {
            emit("conv2", conv(spatial, spatial, k, b.cardinality, hout), spatial, hout);
        } else {
            let split = spatial / N::of(b.scales);
            let (p, f) = conv(split, split, k, b.cardinality, hout);
            let n = N::of(b.scales - 1);
            emit("conv2", (p * n, f * n), spatial, hout);
        }
    };
    let se_at = |emit: &mut dyn FnMut(&'static str, (N, N), N, usize), c: N, hh: usize, at: &[SeVariant]| {
        if at.contains(&b.se_variant) {
            emit("se", se_cost(c, b.se_reduction), c, hh);
        }
    };
    let emit: &mut dyn FnMut(&'static str, (N, N), N, usize) = emit;
    se_at(emit, cin, h, &[SeVariant::Pre]);
    match b.topology {
        Topology::Basic => {
            emit("n1", norm(if pre { cin } else { cout }), if pre { cin } else { cout }, if pre { h } else { ho });
            emit("conv1", conv(cin, cout, k, 1, ho), cout, ho);
            emit("n2", norm(cout), cout, ho);
            spatial_conv(emit, 1, ho);
            se_at(emit, spatial, ho, &[SeVariant::Conv3x3]);
        }
        Topology::Bottleneck | Topology::InvertedBottleneck => {
            emit("n1", norm(if pre { cin } else { reduce }), if pre { cin } else { reduce }, h);
            emit("conv1", conv(cin, reduce, 1, 1, h), reduce, h);
            emit("n2", norm(if pre { reduce } else { spatial }), if pre { reduce } else { spatial }, if pre { h } else { ho });
            spatial_conv(emit, stride, h);
            se_at(emit, spatial, ho, &[SeVariant::Conv3x3]);
            emit("n3", norm(if pre { spatial } else { cout }), if pre { spatial } else { cout }, ho);
            emit("conv3", conv(spatial, cout, 1, 1, ho), cout, ho);
        }
    }
    se_at(emit, cout, ho, &[SeVariant::Standard, SeVariant::Residual, SeVariant::Identity]);
    if cin != cout || stride != 1 {
        emit("proj", conv(cin, cout, 1, 1, ho), cout, ho);
    }
}

/// Emits every layer of a network with real- or integer-valued stage shapes.
fn network_costs<N: CostNum>(
    spec: &NetworkSpec,
    depths: &[N],
    stage_out: &[N],
    resolution: usize,
    emit: &mut impl FnMut(String, (N, N), N, usize),
) {
    let pre = spec.activation_order() == ActivationOrder::Pre;
    let stem = N::of(spec.stem_channels);
    emit(String::from("stem.conv"), conv(N::of(3), stem, 3, 1, resolution), stem, resolution);
    if !pre {
        emit(String::from("stem.norm"), norm(stem), stem, resolution);
    }
    let mut cin = stem;
    let mut h = resolution;
    for (si, stage) in spec.stages.iter().enumerate() {
        let cout = stage_out[si];
        let stride = if si > 0 { 2 } else { 1 };
        let b = &stage.block_template;
        block_costs(b, cin, cout, stride, h, &mut |part, pf, c, hh| {
            emit(format!("s{}.b1.{part}", si + 1), pf, c, hh)
        });
        h = out_size(h, stride);
        // remaining blocks are identical; weight them by depth - 1
        let rest = depths[si] - N::one();
        if rest > N::zero() {
            block_costs(b, cout, cout, 1, h, &mut |part, (p, f), c, hh| {
                emit(format!("s{}.b2+.{part}", si + 1), (p * rest, f * rest), c, hh)
            });
        }
        cin = cout;
    }
    if pre {
        emit(String::from("head.norm"), norm(cin), cin, h);
    }
    let classes = N::of(spec.num_classes);
    emit(String::from("head.fc"), (cin * classes + classes, cin * classes), classes, 1);
}

/// Per-layer cost table at `resolution`, one row per parameterized layer.
pub fn cost_report_at(spec: &NetworkSpec, resolution: usize) -> Result<CostReport> {
    spec.validate()?;
    let mut s = spec.clone();
    s.input_resolution = resolution;
    s.validate()?;
    let mut rows = Vec::new();
    let mut push = |layer: String, (params, flops): (u64, u64), c: u64, h: usize| {
        rows.push(LayerCost { layer, params, flops, out_shape: [c as usize, h, h] });
    };
    // Expand per block so every row names a concrete layer.
    let pre = s.activation_order() == ActivationOrder::Pre;
    let stem = s.stem_channels as u64;
    push(String::from("stem.conv"), conv(3, stem, 3, 1, resolution), stem, resolution);
    if !pre {
        push(String::from("stem.norm"), norm(stem), stem, resolution);
    }
    let mut h = resolution;
    for pb in s.blocks() {
        let b = &pb.spec;
        let name = format!("s{}.b{}", pb.stage + 1, pb.index + 1);
        block_costs(b, b.in_channels as u64, b.out_channels as u64, b.stride, h, &mut |part, pf, c, hh| {
            push(format!("{name}.{part}"), pf, c, hh)
        });
        h = out_size(h, b.stride);
    }
    let c = s.final_channels() as u64;
    if pre {
        push(String::from("head.norm"), norm(c), c, h);
    }
    let classes = s.num_classes as u64;
    push(String::from("head.fc"), (c * classes + classes, c * classes), classes, 1);
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    Ok(CostReport { total_params, total_flops, resolution, per_layer: rows })
}

pub fn cost_report(spec: &NetworkSpec) -> Result<CostReport> {
    cost_report_at(spec, spec.input_resolution)
}

pub fn count_params(spec: &NetworkSpec) -> Result<u64> {
    Ok(cost_report(spec)?.total_params)
}

pub fn count_flops(spec: &NetworkSpec, resolution: usize) -> Result<u64> {
    Ok(cost_report_at(spec, resolution)?.total_flops)
}

/// FLOPs of `spec` with integer stage depths and widths replaced by real
/// values. Agrees with [`count_flops`] at integer points whose widths satisfy
/// every divisibility constraint.
pub fn flops_continuous(spec: &NetworkSpec, depths: [f64; 3], widths: [f64; 3], resolution: usize) -> f64 {
    let stage_out: Vec<f64> = spec
        .stages
        .iter()
        .zip(widths)
        .map(|(s, w)| (s.base_channels * s.block_template.topology.expansion()) as f64 * w)
        .collect();
    let mut total = 0.0;
    network_costs(spec, &depths, &stage_out, resolution, &mut |_, (_, f), _, _| total += f);
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{robust_preset, robust_resnet, wrn, Preset};

    #[test]
    fn single_conv() {
        assert_eq!(conv_cost(2, 4, 3, 1, 8, 8), (72, 4608));
    }

    #[test]
    fn totals_are_row_sums() {
        let r = cost_report(&robust_preset(Preset::A1, 10)).unwrap();
        assert_eq!(r.total_params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.per_layer.last().unwrap().out_shape, [10, 1, 1]);
    }

    #[test]
    fn continuous_matches_integer() {
        for spec in [robust_resnet([3, 2, 2], [2, 3, 1], 10, 32), wrn(16, 4, 10).unwrap()] {
            let d = spec.depths();
            let w = spec.widths();
            let c = flops_continuous(
                &spec,
                [d[0] as f64, d[1] as f64, d[2] as f64],
                [w[0] as f64, w[1] as f64, w[2] as f64],
                32,
            );
            assert_eq!(c, count_flops(&spec, 32).unwrap() as f64);
        }
    }

    #[test]
    fn calibration_within_two_percent() {
        let close = |got: u64, want: f64| ((got as f64 - want) / want).abs() < 0.02;
        let w28 = wrn(28, 10, 10).unwrap();
        assert!(close(count_params(&w28).unwrap(), 36.5e6));
        assert!(close(count_flops(&w28, 32).unwrap(), 5.20e9));
        let a1 = robust_preset(Preset::A1, 10);
        assert!(close(count_params(&a1).unwrap(), 19.2e6));
        assert!(close(count_flops(&a1, 32).unwrap(), 5.11e9));
    }
}
