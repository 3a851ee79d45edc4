//! Fixed-precision number formatting shared by the CSV and JSON writers.

/// Formats like C's `%.17g`: 17 significant digits, trailing zeros removed.
/// The output parses back to the identical `f64`.
pub fn sig17(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };
    let sign = if negative { "-" } else { "" };

    if (-4..17).contains(&exp) {
        let body = if exp >= 0 {
            let int_len = exp as usize + 1;
            if digits.len() <= int_len {
                format!("{}{}", digits, "0".repeat(int_len - digits.len()))
            } else {
                format!("{}.{}", &digits[..int_len], &digits[int_len..])
            }
        } else {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        };
        format!("{sign}{body}")
    } else {
        let frac = &digits[1..];
        let exp_sign = if exp < 0 { '-' } else { '+' };
        if frac.is_empty() {
            format!("{sign}{}e{exp_sign}{:02}", &digits[..1], exp.abs())
        } else {
            format!("{sign}{}.{}e{exp_sign}{:02}", &digits[..1], frac, exp.abs())
        }
    }
}
