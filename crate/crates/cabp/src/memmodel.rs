//! Static per-layer memory model: predicts parameter bytes, saved-activation
//! bytes, and pooled-payload bytes for every convolution without running the
//! network. Numbers come straight from shape inference, so they must agree
//! exactly with what the ledger records in a real run.

use std::io::Write;

use crate::compress::pooled_dims;
use crate::error::{Error, Result};
use crate::ledger::MIB;
use crate::model::Network;
use crate::scalar::Scalar;
use crate::tape::OpKind;

/// One convolution layer's static estimate.
#[derive(Debug, Clone)]
pub struct LayerMemoryRow {
    pub layer: String,
    pub w_bytes: u64,
    /// Bytes of the layer's input activation at the modeled batch size.
    pub x_bytes: u64,
    /// Pooled-payload bytes per requested kernel, floor-division grid.
    pub z_bytes: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct MemoryModel {
    pub kernels: Vec<(usize, usize)>,
    pub rows: Vec<LayerMemoryRow>,
}

impl MemoryModel {
    /// Column totals: (w, x, z per kernel).
    pub fn sums(&self) -> (u64, u64, Vec<u64>) {
        let w = self.rows.iter().map(|r| r.w_bytes).sum();
        let x = self.rows.iter().map(|r| r.x_bytes).sum();
        let z = (0..self.kernels.len())
            .map(|i| self.rows.iter().map(|r| r.z_bytes[i]).sum())
            .collect();
        (w, x, z)
    }

    pub fn row(&self, layer: &str) -> Option<&LayerMemoryRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    /// Comma-separated table in MiB with a trailing Sum row.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        write!(out, "layer,w_mib,x_mib")?;
        for &(kh, kw) in &self.kernels {
            if kh == kw {
                write!(out, ",z{kh}_mib")?;
            } else {
                write!(out, ",z{kh}x{kw}_mib")?;
            }
        }
        writeln!(out)?;
        for r in &self.rows {
            write!(out, "{},{:.2},{:.2}", r.layer, r.w_bytes as f64 / MIB, r.x_bytes as f64 / MIB)?;
            for &z in &r.z_bytes {
                write!(out, ",{:.2}", z as f64 / MIB)?;
            }
            writeln!(out)?;
        }
        let (w, x, z) = self.sums();
        write!(out, "Sum,{:.2},{:.2}", w as f64 / MIB, x as f64 / MIB)?;
        for zv in z {
            write!(out, ",{:.2}", zv as f64 / MIB)?;
        }
        writeln!(out)?;
        Ok(())
    }
}

/// Builds the model for every conv layer of `net` at the given batch size and
/// input resolution.
pub fn static_model<S: Scalar>(
    net: &Network<S>,
    batch: usize,
    input_chw: (usize, usize, usize),
    kernels: &[(usize, usize)],
) -> Result<MemoryModel> {
    let elem = std::mem::size_of::<S>() as u64;
    let shapes = net.infer_value_shapes(batch, input_chw)?;
    let mut rows = Vec::new();
    for node in net.nodes() {
        let OpKind::Conv2d { spec, .. } = &node.op else { continue };
        let input_shape = &shapes[node.inputs[0]];
        let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
        let w_bytes = spec.weight_shape().iter().product::<usize>() as u64 * elem;
        let x_bytes = (n * c * h * w) as u64 * elem;
        let mut z_bytes = Vec::with_capacity(kernels.len());
        for &k in kernels {
            let (zh, zw) = pooled_dims(h, w, k);
            if zh == 0 || zw == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "kernel {k:?} leaves no complete block on layer '{}' ({h}x{w})",
                    node.name
                )));
            }
            z_bytes.push((n * c * zh * zw) as u64 * elem);
        }
        rows.push(LayerMemoryRow { layer: node.name.clone(), w_bytes, x_bytes, z_bytes });
    }
    Ok(MemoryModel { kernels: kernels.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::MemoryLedger;
    use crate::model::resnet::{Arch, ResNetConfig};

    fn resnet18_model(batch: usize) -> MemoryModel {
        let mut ledger = MemoryLedger::new();
        let config = ResNetConfig::imagenet(1000);
        let net = Arch::ResNet18.build::<f32>(&config, &mut ledger).unwrap();
        static_model(&net, batch, (3, 224, 224), &[(1, 1), (2, 2), (4, 4)]).unwrap()
    }

    #[test]
    fn stem_row_at_batch_32() {
        let model = resnet18_model(32);
        let row = model.row("conv1").unwrap();
        assert_eq!(row.x_bytes, 32 * 3 * 224 * 224 * 4);
        assert_eq!(row.z_bytes[1], 32 * 3 * 112 * 112 * 4);
        assert_eq!(row.z_bytes[2], 32 * 3 * 56 * 56 * 4);
        assert_eq!(row.w_bytes, 64 * 3 * 7 * 7 * 4);
    }

    #[test]
    fn identity_kernel_column_equals_x() {
        let model = resnet18_model(32);
        for row in &model.rows {
            assert_eq!(row.z_bytes[0], row.x_bytes, "layer {}", row.layer);
        }
    }

    #[test]
    fn doubling_batch_doubles_x_and_z_not_w() {
        let m32 = resnet18_model(32);
        let m64 = resnet18_model(64);
        for (a, b) in m32.rows.iter().zip(m64.rows.iter()) {
            assert_eq!(a.layer, b.layer);
            assert_eq!(2 * a.x_bytes, b.x_bytes);
            assert_eq!(2 * a.z_bytes[1], b.z_bytes[1]);
            assert_eq!(a.w_bytes, b.w_bytes);
        }
    }

    #[test]
    fn floor_division_rows() {
        let model = resnet18_model(32);
        // 7x7 maps pool to 3x3 under a 2x2 kernel and 1x1 under 4x4.
        let row = model.row("layer4.0.conv2").unwrap();
        assert_eq!(row.x_bytes, 32 * 512 * 7 * 7 * 4);
        assert_eq!(row.z_bytes[1], 32 * 512 * 3 * 3 * 4);
        assert_eq!(row.z_bytes[2], 32 * 512 * 1 * 1 * 4);
    }

    #[test]
    fn csv_has_sum_row_and_kernel_columns() {
        let model = resnet18_model(32);
        let mut buf = Vec::new();
        model.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,w_mib,x_mib,z1_mib,z2_mib,z4_mib\n"));
        assert!(text.lines().last().unwrap().starts_with("Sum,"));
        assert!(text.contains("\nconv1,0.04,18.38,18.38,4.59,1.15\n"));
    }
}
