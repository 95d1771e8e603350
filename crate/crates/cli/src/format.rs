use crate::UsageError;

/// `x` with at most `digits` significant digits, trailing zeros dropped.
pub fn sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn sig9(x: f64) -> String {
    sig(x, 9)
}

/// Splits a comma list, dropping empty items.
pub fn split_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect()
}

pub fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>, UsageError> {
    split_list(s)
        .into_iter()
        .map(|t| t.parse::<f64>().map_err(|e| UsageError(format!("{what} {t:?}: {e}"))))
        .collect()
}

pub fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, UsageError> {
    split_list(s)
        .into_iter()
        .map(|t| t.parse::<usize>().map_err(|e| UsageError(format!("{what} {t:?}: {e}"))))
        .collect()
}

pub fn median_ms(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig9(30.21694312345), "30.2169431");
        assert_eq!(sig9(100.0), "100");
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(0.1234567891234), "0.123456789");
        assert_eq!(sig9(262599132315648.0), "262599132315648");
        assert_eq!(sig(2.5, 3), "2.5");
    }

    #[test]
    fn lists() {
        assert_eq!(split_list(""), Vec::<&str>::new());
        assert_eq!(split_list("a, b,,c"), vec!["a", "b", "c"]);
        assert_eq!(parse_f64_list("50,33.3", "x").unwrap(), vec![50.0, 33.3]);
        assert!(parse_f64_list("50,x", "x").is_err());
        assert_eq!(parse_usize_list("0,3", "l").unwrap(), vec![0, 3]);
    }

    #[test]
    fn medians() {
        assert_eq!(median_ms(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_ms(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
