//! Number formatting and plain-text tables shared by the report renderers.

/// Formats like C's `%.{digits}g`: `digits` significant digits, trailing
/// zeros trimmed, scientific notation outside `1e-4 <= |x| < 10^digits`.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
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

/// Signed percentage with a fixed number of decimals, e.g. `-1.98%`.
pub fn fmt_pct(x: f64, decimals: usize) -> String {
    let s = format!("{:.*}", decimals, x);
    // render -0.00 as 0.00
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        format!("{}%", s.trim_start_matches('-'))
    } else {
        format!("{s}%")
    }
}

/// Left-aligned first column, right-aligned others, with a rule under the header.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut out = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        out.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig_formatting_matches_printf_g() {
        let cases = [
            (1.0, "1"),
            (100.0, "100"),
            (1.02345678, "1.02346"),
            (0.000123456789, "0.000123457"),
            (0.0000123456789, "1.23457e-05"),
            (1234567.0, "1.23457e+06"),
            (-2.5, "-2.5"),
            (0.0, "0"),
            (999999.5, "1e+06"),
            (0.1, "0.1"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_sig(x, 6), want, "x = {x}");
        }
    }

    #[test]
    fn pct_formatting() {
        assert_eq!(fmt_pct(-1.98, 2), "-1.98%");
        assert_eq!(fmt_pct(-0.0001, 2), "0.00%");
        assert_eq!(fmt_pct(0.209, 3), "0.209%");
    }

    #[test]
    fn table_alignment() {
        let t = render_table(&["Data", "Baseline"], &[vec!["Impression".into(), "1.01".into()]]);
        assert_eq!(t, "Data        Baseline\n--------------------\nImpression      1.01\n");
    }
}
