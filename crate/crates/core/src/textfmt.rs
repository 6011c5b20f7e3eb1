//! Formatting for deterministic text outputs.

/// Floats in CSV outputs carry 17 significant digits, so identical values
/// always print to identical bytes and round-trip exactly.
pub fn csv_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_floats_roundtrip_exactly() {
        for v in [0.1, 1.0 / 3.0, 2.0_f64.sqrt(), -1e-17, 123456.789] {
            let s = csv_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }
}
