/// `sign(j - i) * ln(1 + |j - i|)`.
pub fn symlog_distance(i: usize, j: usize) -> f64 {
    let gap = j as f64 - i as f64;
    gap.signum() * gap.abs().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(symlog_distance(3, 3), 0.0);
        assert!((symlog_distance(2, 5) - 4f64.ln()).abs() < 1e-15);
        assert!((symlog_distance(5, 2) + 1.386_294_361_119_890_6).abs() < 1e-12);
        assert!((symlog_distance(0, 1) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
