//! FLOPs accounting under sparsity.
//!
//! Inference cost counts 2 FLOPs per multiply-accumulate of every
//! convolutional and linear layer, scaled by the layer's weight density;
//! normalisation, pooling and activations are ignored. Backward costs twice
//! the forward pass. Per sample, a compressed epoch costs `3·F_C` and a
//! decompressed epoch `2·F_D + F`, where `F` is the fully dense forward cost.

use serde::{Deserialize, Serialize};

use crate::acdc::{PhaseKind, PhaseSchedule};
use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        kernel: [usize; 2],
        in_channels: usize,
        out_channels: usize,
        /// Output spatial size `[h, w]`.
        output: [usize; 2],
        #[serde(default = "one")]
        groups: usize,
    },
    Linear {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
    },
    /// Any other operation; contributes no FLOPs.
    Other { op: String },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default = "yes")]
    pub prunable: bool,
}

fn yes() -> bool {
    true
}

impl Layer {
    /// Multiply-accumulates per sample at full density.
    pub fn macs(&self) -> u64 {
        match &self.kind {
            LayerKind::Conv2d {
                kernel,
                in_channels,
                out_channels,
                output,
                groups,
            } => {
                (kernel[0] * kernel[1] * (in_channels / groups)) as u64
                    * *out_channels as u64
                    * (output[0] * output[1]) as u64
            }
            LayerKind::Linear { inputs, outputs } => (*inputs as u64) * (*outputs as u64),
            LayerKind::Other { .. } => 0,
        }
    }

    /// Weight count of the layer.
    pub fn params(&self) -> u64 {
        match &self.kind {
            LayerKind::Conv2d {
                kernel,
                in_channels,
                out_channels,
                groups,
                ..
            } => (kernel[0] * kernel[1] * (in_channels / groups) * out_channels) as u64,
            LayerKind::Linear { inputs, outputs } => (*inputs as u64) * (*outputs as u64),
            LayerKind::Other { .. } => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl LayerManifest {
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let ok = match &l.kind {
                LayerKind::Conv2d {
                    kernel,
                    in_channels,
                    out_channels,
                    output,
                    groups,
                } => {
                    kernel.iter().chain(output).all(|d| *d > 0)
                        && *in_channels > 0
                        && *out_channels > 0
                        && *groups > 0
                        && in_channels % groups == 0
                        && out_channels % groups == 0
                }
                LayerKind::Linear { inputs, outputs } => *inputs > 0 && *outputs > 0,
                LayerKind::Other { .. } => true,
            };
            if !ok {
                return Err(Error::invalid("layers", format!("layer `{}` has invalid dimensions", l.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: LayerManifest = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(Layer::macs).sum()
    }

    /// Linear layers of an MLP with the given widths.
    pub fn from_mlp(widths: &[usize]) -> Self {
        LayerManifest {
            name: format!("mlp-{}", widths.iter().map(usize::to_string).collect::<Vec<_>>().join("-")),
            layers: widths
                .windows(2)
                .enumerate()
                .map(|(l, w)| Layer {
                    name: format!("layer{l}"),
                    kind: LayerKind::Linear {
                        inputs: w[0],
                        outputs: w[1],
                    },
                    prunable: true,
                })
                .collect(),
        }
    }
}

/// Forward FLOPs per sample: `Σ 2·MACs·density`.
pub fn forward_flops(m: &LayerManifest, densities: &[f64]) -> Result<f64> {
    check_len(m.layers.len(), densities.len())?;
    let mut total = 0.0;
    for (l, d) in m.layers.iter().zip(densities) {
        if !(0.0..=1.0).contains(d) {
            return Err(Error::invalid("density", format!("layer `{}` density {d} outside [0, 1]", l.name)));
        }
        total += 2.0 * l.macs() as f64 * d;
    }
    Ok(total)
}

pub fn dense_forward_flops(m: &LayerManifest) -> f64 {
    forward_flops(m, &vec![1.0; m.layers.len()]).expect("unit densities are valid")
}

/// Per-epoch, per-layer weight density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityTrajectory {
    pub epochs: Vec<Vec<f64>>,
}

impl DensityTrajectory {
    pub fn constant(epochs: usize, densities: Vec<f64>) -> Self {
        DensityTrajectory {
            epochs: vec![densities; epochs],
        }
    }

    /// Densities taken per phase kind: `compressed` during compressed epochs
    /// and `decompressed` otherwise.
    pub fn by_phase(schedule: &PhaseSchedule, compressed: Vec<f64>, decompressed: Vec<f64>) -> Self {
        DensityTrajectory {
            epochs: (0..schedule.total_epochs)
                .map(|e| match schedule.kind_at(e) {
                    Some(PhaseKind::Compressed) => compressed.clone(),
                    _ => decompressed.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseFlops {
    pub start: usize,
    pub end: usize,
    pub kind: PhaseKind,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    /// Dense inference FLOPs per sample `F`.
    pub forward: f64,
    /// `B = 2·F`
    pub backward: f64,
    /// Training FLOPs per sample for each epoch.
    pub per_epoch: Vec<f64>,
    pub phases: Vec<PhaseFlops>,
    pub compressed_total: f64,
    pub decompressed_total: f64,
    pub total: f64,
}

/// Training FLOPs of `schedule` given a density trajectory sampled once per
/// epoch.
pub fn train_flops(
    m: &LayerManifest,
    schedule: &PhaseSchedule,
    traj: &DensityTrajectory,
    samples_per_epoch: u64,
) -> Result<FlopReport> {
    check_len(schedule.total_epochs, traj.epochs.len())?;
    let dense = dense_forward_flops(m);
    let per_epoch = traj
        .epochs
        .iter()
        .enumerate()
        .map(|(e, d)| {
            let f = forward_flops(m, d)?;
            Ok(match schedule.kind_at(e).expect("epoch inside schedule") {
                PhaseKind::Compressed => 3.0 * f,
                PhaseKind::Decompressed => 2.0 * f + dense,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let samples = samples_per_epoch as f64;
    let phases: Vec<PhaseFlops> = schedule
        .phases()
        .iter()
        .map(|p| PhaseFlops {
            start: p.start,
            end: p.end,
            kind: p.kind,
            total: per_epoch[p.start..p.end].iter().sum::<f64>() * samples,
        })
        .collect();
    let sum_kind = |k| phases.iter().filter(|p| p.kind == k).map(|p| p.total).sum::<f64>();
    let compressed_total = sum_kind(PhaseKind::Compressed);
    let decompressed_total = sum_kind(PhaseKind::Decompressed);
    Ok(FlopReport {
        forward: dense,
        backward: 2.0 * dense,
        per_epoch,
        total: phases.iter().map(|p| p.total).sum(),
        phases,
        compressed_total,
        decompressed_total,
    })
}

fn conv(name: String, k: usize, cin: usize, cout: usize, out: usize, groups: usize) -> Layer {
    Layer {
        name,
        kind: LayerKind::Conv2d {
            kernel: [k, k],
            in_channels: cin,
            out_channels: cout,
            output: [out, out],
            groups,
        },
        prunable: true,
    }
}

/// ResNet50 at 224×224 input, stride on the 3×3 convolution of each
/// bottleneck, projection shortcuts on the first block of every stage.
pub fn resnet50() -> LayerManifest {
    let mut layers = vec![conv("conv1".into(), 7, 3, 64, 112, 1)];
    let stages = [(3, 64, 56), (4, 128, 28), (6, 256, 14), (3, 512, 7)];
    let mut in_c = 64;
    let mut in_hw = 56;
    for (s, &(blocks, width, out_hw)) in stages.iter().enumerate() {
        let out_c = 4 * width;
        for b in 0..blocks {
            let p = format!("layer{}.{b}", s + 1);
            let (cin, hw_in) = if b == 0 { (in_c, in_hw) } else { (out_c, out_hw) };
            layers.push(conv(format!("{p}.conv1"), 1, cin, width, hw_in, 1));
            layers.push(conv(format!("{p}.conv2"), 3, width, width, out_hw, 1));
            layers.push(conv(format!("{p}.conv3"), 1, width, out_c, out_hw, 1));
            if b == 0 {
                layers.push(conv(format!("{p}.downsample"), 1, cin, out_c, out_hw, 1));
            }
        }
        in_c = out_c;
        in_hw = out_hw;
    }
    layers.push(Layer {
        name: "fc".into(),
        kind: LayerKind::Linear {
            inputs: 2048,
            outputs: 1000,
        },
        prunable: true,
    });
    LayerManifest {
        name: "resnet50".into(),
        layers,
    }
}

/// MobileNetV1 (width multiplier 1.0) at 224×224 input.
pub fn mobilenet_v1() -> LayerManifest {
    let mut layers = vec![conv("conv1".into(), 3, 3, 32, 112, 1)];
    let blocks = [
        (32, 64, 112),
        (64, 128, 56),
        (128, 128, 56),
        (128, 256, 28),
        (256, 256, 28),
        (256, 512, 14),
        (512, 512, 14),
        (512, 512, 14),
        (512, 512, 14),
        (512, 512, 14),
        (512, 512, 14),
        (512, 1024, 7),
        (1024, 1024, 7),
    ];
    for (i, &(cin, cout, hw)) in blocks.iter().enumerate() {
        layers.push(conv(format!("block{}.dw", i + 1), 3, cin, cin, hw, cin));
        layers.push(conv(format!("block{}.pw", i + 1), 1, cin, cout, hw, 1));
    }
    layers.push(Layer {
        name: "fc".into(),
        kind: LayerKind::Linear {
            inputs: 1024,
            outputs: 1000,
        },
        prunable: true,
    });
    LayerManifest {
        name: "mobilenet_v1".into(),
        layers,
    }
}

/// Manifest JSON shipped with the crate, by name.
pub fn builtin_manifest_json(name: &str) -> Option<&'static str> {
    match name {
        "resnet50" => Some(include_str!("../fixtures/resnet50.json")),
        "mobilenet_v1" => Some(include_str!("../fixtures/mobilenet_v1.json")),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acdc::build_schedule;

    fn linear(i: usize, o: usize) -> LayerManifest {
        LayerManifest {
            name: "t".into(),
            layers: vec![Layer {
                name: "fc".into(),
                kind: LayerKind::Linear { inputs: i, outputs: o },
                prunable: true,
            }],
        }
    }

    #[test]
    fn linear_layer_flops() {
        assert_eq!(forward_flops(&linear(100, 50), &[1.0]).unwrap(), 10_000.0);
    }

    #[test]
    fn conv_layer_flops() {
        let m = LayerManifest {
            name: "c".into(),
            layers: vec![conv("c".into(), 3, 64, 64, 56, 1)],
        };
        assert_eq!(forward_flops(&m, &[0.5]).unwrap(), 115_605_504.0);
    }

    #[test]
    fn other_layers_are_free_and_densities_checked() {
        let mut m = linear(4, 4);
        m.layers.push(Layer {
            name: "bn".into(),
            kind: LayerKind::Other { op: "batch_norm".into() },
            prunable: false,
        });
        assert_eq!(forward_flops(&m, &[1.0, 1.0]).unwrap(), 32.0);
        assert!(forward_flops(&m, &[1.5, 1.0]).is_err());
        assert!(forward_flops(&m, &[1.0]).is_err());
    }

    #[test]
    fn one_epoch_dense_is_three_forward() {
        let m = linear(10, 10);
        let s = build_schedule(2, 1, 0, 0, 0, 1).unwrap();
        let traj = DensityTrajectory::constant(2, vec![1.0]);
        let r = train_flops(&m, &s, &traj, 1).unwrap();
        assert_eq!(r.per_epoch, vec![600.0, 600.0]);
        assert_eq!(r.backward, 2.0 * r.forward);
    }

    #[test]
    fn groups_must_divide() {
        let m = LayerManifest {
            name: "bad".into(),
            layers: vec![conv("c".into(), 3, 10, 10, 4, 3)],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn builtin_fixtures_match_builders() {
        for (name, built) in [("resnet50", resnet50()), ("mobilenet_v1", mobilenet_v1())] {
            let shipped = LayerManifest::from_json(builtin_manifest_json(name).unwrap()).unwrap();
            assert_eq!(shipped, built, "{name}");
        }
    }

    #[test]
    fn known_mac_counts() {
        // commonly quoted totals: ResNet50 ≈ 4.09 GMACs, MobileNetV1 ≈ 569 MMACs
        let r = resnet50().total_macs() as f64;
        assert!((r / 4.09e9 - 1.0).abs() < 0.01, "{r}");
        let m = mobilenet_v1().total_macs() as f64;
        assert!((m / 5.69e8 - 1.0).abs() < 0.01, "{m}");
        // parameter counts (weights only): ResNet50 ≈ 25.5M, MobileNetV1 ≈ 4.2M
        let rp: u64 = resnet50().layers.iter().map(Layer::params).sum();
        assert!((rp as f64 / 25.5e6 - 1.0).abs() < 0.01, "{rp}");
        let mp: u64 = mobilenet_v1().layers.iter().map(Layer::params).sum();
        assert!((mp as f64 / 4.2e6 - 1.0).abs() < 0.02, "{mp}");
    }

    #[test]
    #[ignore = "writes the shipped manifest fixtures"]
    fn regenerate_fixtures() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
        std::fs::write(format!("{dir}/resnet50.json"), resnet50().to_json().unwrap()).unwrap();
        std::fs::write(format!("{dir}/mobilenet_v1.json"), mobilenet_v1().to_json().unwrap()).unwrap();
    }
}
