//! Float formatting for output files and summaries.

/// 17 significant digits; round-trips any f64. Used in machine-readable files.
pub fn machine(x: f64) -> String {
    format!("{x:.16e}")
}

/// 6 significant digits in the style of printf `%.6g`, for human summaries.
pub fn human(x: f64) -> String {
    sig(x, 6)
}

fn sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if exp < -4 || exp >= digits as i32 {
        let s = format!("{:.*e}", digits - 1, x);
        trim_exp_zeros(&s)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        trim_frac_zeros(&s)
    }
}

fn trim_frac_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

fn trim_exp_zeros(s: &str) -> String {
    match s.split_once('e') {
        Some((mant, exp)) => format!("{}e{exp}", trim_frac_zeros(mant)),
        None => s.to_string(),
    }
}
