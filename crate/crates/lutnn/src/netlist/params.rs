//! Parameter-count reporting for a tiled LUT layer:
//! `n_nodes * omega * (2^k / (t_i*t_o) + p * t_i*t_o)`, where `n_nodes` is
//! the unpruned physical node count of the target layer. The first addend
//! counts configuration-mask bits, the second parameter-RAM bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lut::LutGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub mask_params: f64,
    pub ram_params: f64,
    pub total: f64,
}

/// Evaluate the count formula directly.
pub fn parameter_count_formula(
    n_nodes: usize,
    omega: f64,
    k: usize,
    p: usize,
    t_i: usize,
    t_o: usize,
) -> Result<ParameterCount> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::config(format!(
            "density must be in (0, 1], got {omega}"
        )));
    }
    let t = (t_i * t_o) as f64;
    let mask = n_nodes as f64 * omega * (1u64 << k) as f64 / t;
    let ram = n_nodes as f64 * omega * p as f64 * t;
    Ok(ParameterCount {
        mask_params: mask,
        ram_params: ram,
        total: mask + ram,
    })
}

/// Count for a layer geometry: the unpruned physical node count is the
/// layer's connection grid divided by the tiling factor.
pub fn parameter_count(
    geometry: &LutGeometry,
    omega: f64,
    k: usize,
    p: usize,
    t_i: usize,
    t_o: usize,
) -> Result<ParameterCount> {
    let connections = match *geometry {
        LutGeometry::Dense { in_dim, out_dim } => in_dim * out_dim,
        LutGeometry::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => in_channels * out_channels * kernel * kernel,
    };
    let t = t_i * t_o;
    if t == 0 || connections % t != 0 {
        return Err(Error::config(format!(
            "tiling factor {t} does not divide {connections} connections"
        )));
    }
    parameter_count_formula(connections / t, omega, k, p, t_i, t_o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_configuration() {
        // 9216 nodes, omega = 1, k = 6, t_i = t_o = 8, p = 1:
        // 9216 * (64/64 + 64) = 599040
        let c = parameter_count_formula(9216, 1.0, 6, 1, 8, 8).unwrap();
        assert_eq!(c.mask_params, 9216.0);
        assert_eq!(c.ram_params, 9216.0 * 64.0);
        assert_eq!(c.total, 599040.0);
    }

    #[test]
    fn unrolled_case_is_mask_only() {
        let c = parameter_count_formula(100, 1.0, 4, 0, 1, 1).unwrap();
        assert_eq!(c.mask_params, 1600.0);
        assert_eq!(c.ram_params, 0.0);
    }

    #[test]
    fn linear_in_density() {
        let full = parameter_count_formula(9216, 1.0, 6, 1, 8, 8).unwrap();
        let half = parameter_count_formula(9216, 0.5, 6, 1, 8, 8).unwrap();
        assert_eq!(half.mask_params, full.mask_params / 2.0);
        assert_eq!(half.ram_params, full.ram_params / 2.0);
    }

    #[test]
    fn geometry_derivation() {
        // conv, 256 outputs, 3x3x256 window, t_i = t_o = 8 -> 9216 nodes
        let g = LutGeometry::Conv {
            in_channels: 256,
            out_channels: 256,
            kernel: 3,
            stride: 1,
        };
        let c = parameter_count(&g, 1.0, 6, 1, 8, 8).unwrap();
        assert_eq!(c.total, 599040.0);
    }

    #[test]
    fn rejects_out_of_range_density() {
        assert!(parameter_count_formula(10, 0.0, 4, 0, 1, 1).is_err());
        assert!(parameter_count_formula(10, 1.5, 4, 0, 1, 1).is_err());
    }
}
