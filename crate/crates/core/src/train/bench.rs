use std::time::Instant;

use crate::error::{Error, Result};
use crate::network::{AsaNet, FusionMode, NetConfig, RGB_CHANNELS, SAR_CHANNELS};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: FusionMode,
    pub params: usize,
    /// Analytic operations of one forward pass on a single image.
    pub flops: u64,
    /// Measured inference throughput.
    pub images_per_sec: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "model,params,flops,images_per_sec";

    pub fn csv(&self) -> String {
        format!("{},{},{},{:.2}", self.mode, self.params, self.flops, self.images_per_sec)
    }
}

/// Complexity and inference speed of every fusion mode on `net`'s geometry.
pub fn bench(net: &NetConfig, batch: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if batch == 0 || repeats == 0 {
        return Err(Error::Config("bench needs a positive batch size and repeat count".into()));
    }
    let rgb = Tensor::<f32>::full(&[batch, RGB_CHANNELS, net.height, net.width], 0.5);
    let sar = Tensor::<f32>::full(&[batch, SAR_CHANNELS, net.height, net.width], 0.5);
    FusionMode::ALL
        .iter()
        .map(|&mode| {
            let model = AsaNet::<f32>::new(&NetConfig { stages: vec![1, 2, 3, 4], ..net.with_mode(mode) }, 0)?;
            let c = model.complexity()?;
            no_grad(|| model.forward(&rgb, &sar))?;
            let start = Instant::now();
            for _ in 0..repeats {
                no_grad(|| model.forward(&rgb, &sar))?;
            }
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            Ok(BenchRow {
                mode,
                params: c.params,
                flops: c.flops,
                images_per_sec: (batch * repeats) as f64 / secs,
            })
        })
        .collect()
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!("{:<10} {:>12} {:>14} {:>12}\n", "model", "params", "MFLOPs", "images/s");
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>12} {:>14.2} {:>12.1}\n",
            r.mode.name(),
            r.params,
            r.flops as f64 / 1e6,
            r.images_per_sec
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_mode_is_reported() {
        let net = NetConfig {
            widths: vec![2, 3, 3, 4],
            blocks: 1,
            height: 16,
            width: 16,
            decoder_width: 3,
            ..NetConfig::default()
        };
        let rows = bench(&net, 1, 1).unwrap();
        assert_eq!(rows.len(), FusionMode::ALL.len());
        let get = |m| rows.iter().find(|r| r.mode == m).unwrap();
        assert!(get(FusionMode::SfmCfm).params > get(FusionMode::PwaOnly).params);
        assert!(rows.iter().all(|r| r.images_per_sec > 0.0 && r.flops > 0));
        assert_eq!(bench_table(&rows).lines().count(), 7);
        assert!(bench(&net, 0, 1).is_err());
    }
}
