//! Axis syntax for `plan` and `eval`: a value, a comma list, or an inclusive
//! range `start:end[:step]`. Repeated flags concatenate.

pub fn parse_f64_axis(specs: &[String]) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for spec in specs {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let fields: Vec<&str> = part.split(':').collect();
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number in `{part}`"));
            match fields.as_slice() {
                [v] => out.push(num(v)?),
                [a, b] | [a, b, _] => {
                    let (a, b) = (num(a)?, num(b)?);
                    let step = if fields.len() == 3 { num(fields[2])? } else { 1.0 };
                    if !(step > 0.0) || b < a {
                        return Err(format!("range `{part}` needs start <= end and a positive step"));
                    }
                    let n = ((b - a) / step + 1e-9).floor() as usize;
                    if n > 1_000_000 {
                        return Err(format!("range `{part}` has too many values"));
                    }
                    // Rounded so that 0:1:0.05 yields exactly 0.05, 0.1, ...
                    out.extend((0..=n).map(|i| ((a + i as f64 * step) * 1e12).round() / 1e12));
                }
                _ => return Err(format!("cannot parse `{part}`")),
            }
        }
    }
    Ok(out)
}

pub fn parse_u64_axis(specs: &[String]) -> Result<Vec<u64>, String> {
    parse_f64_axis(specs)?
        .into_iter()
        .map(|v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as u64) } else { Err(format!("{v} is not a non-negative integer")) })
        .collect()
}

/// `key=value` pairs separated by commas; values may use exponent notation.
pub fn parse_options(spec: &str) -> Result<Vec<(String, f64)>, String> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p.split_once('=').ok_or_else(|| format!("expected key=value, got `{p}`"))?;
            let v = v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number"))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}
