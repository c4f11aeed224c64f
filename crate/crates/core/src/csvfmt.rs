//! Number formatting shared by every CSV writer: six significant digits,
//! `%g`-style switch between fixed and exponent notation.

pub const SIG_DIGITS: usize = 6;

pub fn sig6(x: f64) -> String {
    sig(x, SIG_DIGITS)
}

pub fn sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let digits = digits.max(1);
    // round first so the exponent reflects the rounded value (9.999995 -> 10)
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa), sign, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (2.25e9, "2.25e+09"),
            (123456.7, "123457"),
            (999999.5, "1e+06"),
            (0.0001234567, "0.000123457"),
            (0.00001234567, "1.23457e-05"),
            (-40.00512, "-40.0051"),
            (9.9999996, "10"),
            (59.87, "59.87"),
            (1e-12, "1e-12"),
        ];
        for (x, want) in cases {
            assert_eq!(sig6(x), want, "{x}");
        }
        assert_eq!(sig6(f64::NAN), "nan");
    }
}
