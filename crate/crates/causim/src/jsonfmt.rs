//! JSON serialization with floats printed at 17 significant digits, enough
//! to round-trip any IEEE-754 double exactly.

use serde::Serialize;
use serde_json::ser::Formatter;

struct SigDigits17;

impl Formatter for SigDigits17 {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes `value` to JSON with every f64 printed at 17 significant
/// digits.
pub fn to_string<T: Serialize>(value: &T) -> crate::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits17);
    value
        .serialize(&mut ser)
        .map_err(|e| crate::Error::invalid_argument(format!("json serialization: {e}")))?;
    Ok(String::from_utf8(buf).expect("json output is utf-8"))
}

/// Parses JSON produced by [`to_string`] (or any standard JSON).
pub fn from_str<'a, T: serde::Deserialize<'a>>(s: &'a str) -> crate::Result<T> {
    serde_json::from_str(s).map_err(|e| crate::Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn f64_roundtrips_exactly() {
        let xs = vec![0.1, 1.0 / 3.0, 2.0f64.sqrt(), -1.2345678901234567e-8];
        let s = super::to_string(&xs).unwrap();
        let back: Vec<f64> = super::from_str(&s).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
