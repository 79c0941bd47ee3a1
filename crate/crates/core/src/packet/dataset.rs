//! CSV storage of encoded packets: `f0,...,f1599,label`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{EncodedPacket, Label, PacketError, SourceId, CANONICAL_LEN};

/// Distance from the byte grid within which a read value is snapped onto it.
const GRID_SNAP: f64 = 1e-6;

pub fn header_line(prefix: &str, dim: usize) -> String {
    let mut h = String::with_capacity(dim * 6);
    for i in 0..dim {
        let _ = write!(h, "{prefix}{i},");
    }
    h.push_str("label");
    h
}

/// Nine decimals: every `k / 255` keeps at least seven significant digits.
fn push_value(line: &mut String, v: f64) {
    if v == 0.0 {
        line.push('0');
    } else if v == 1.0 {
        line.push('1');
    } else {
        let _ = write!(line, "{v:.9}");
    }
}

pub fn write_dataset<'a, I>(packets: I, out: &Path) -> Result<usize, PacketError>
where
    I: IntoIterator<Item = &'a EncodedPacket>,
{
    let io = |e: std::io::Error| PacketError::Io(format!("{}: {e}", out.display()));
    let mut w = BufWriter::new(File::create(out).map_err(io)?);
    writeln!(w, "{}", header_line("f", CANONICAL_LEN)).map_err(io)?;
    let mut line = String::with_capacity(CANONICAL_LEN * 8);
    let mut count = 0;
    for p in packets {
        line.clear();
        for &v in &p.values {
            push_value(&mut line, v);
            line.push(',');
        }
        line.push_str(Label::code(p.label));
        writeln!(w, "{line}").map_err(io)?;
        count += 1;
    }
    w.flush().map_err(io)?;
    Ok(count)
}

fn snap(v: f64) -> f64 {
    let k = (v * 255.0).round();
    if (v - k / 255.0).abs() <= GRID_SNAP {
        k / 255.0
    } else {
        v
    }
}

pub fn read_dataset(input: &Path) -> Result<Vec<EncodedPacket>, PacketError> {
    let file_id = input.display().to_string();
    let f = File::open(input).map_err(|e| PacketError::Io(format!("{file_id}: {e}")))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PacketError::Io(format!("{file_id}: {e}")))?;
        if lineno == 0 {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let malformed = |why: String| PacketError::MalformedRow { line: lineno + 1, why };
        let mut fields = line.split(',');
        let mut values = Vec::with_capacity(CANONICAL_LEN);
        for _ in 0..CANONICAL_LEN {
            let f = fields
                .next()
                .ok_or_else(|| malformed(format!("expected {} columns", CANONICAL_LEN + 1)))?;
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| malformed(format!("non-numeric value {f:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(malformed(format!("value {v} outside [0, 1]")));
            }
            values.push(snap(v));
        }
        let label_field = fields
            .next()
            .ok_or_else(|| malformed(format!("expected {} columns", CANONICAL_LEN + 1)))?;
        if fields.next().is_some() {
            return Err(malformed(format!("expected {} columns", CANONICAL_LEN + 1)));
        }
        let label = Label::parse_code(label_field.trim()).map_err(malformed)?;
        out.push(EncodedPacket {
            values,
            label,
            source_id: SourceId {
                file: file_id.clone(),
                index: out.len() as u64,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packet(seed: u8, label: Option<Label>) -> EncodedPacket {
        EncodedPacket {
            values: (0..CANONICAL_LEN)
                .map(|i| ((i as u32 * seed as u32) % 256) as f64 / 255.0)
                .collect(),
            label,
            source_id: SourceId::default(),
        }
    }

    #[test]
    fn header_only_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        assert_eq!(write_dataset(std::iter::empty(), &p).unwrap(), 0);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("f0,f1,"));
        assert!(text.trim_end().ends_with("f1599,label"));
        assert!(read_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_exact_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let pk = vec![
            packet(3, Some(Label::Normal)),
            packet(7, Some(Label::Anomaly)),
            packet(11, None),
        ];
        assert_eq!(write_dataset(&pk, &p).unwrap(), 3);
        let back = read_dataset(&p).unwrap();
        for (a, b) in pk.iter().zip(&back) {
            assert_eq!(a.values, b.values);
            assert_eq!(a.label, b.label);
        }
        assert_eq!(back[2].source_id.index, 2);
    }

    #[test]
    fn malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        let header = header_line("f", CANONICAL_LEN);
        let short = vec!["0"; CANONICAL_LEN - 1].join(",") + ",0";
        std::fs::write(&p, format!("{header}\n{short}\n")).unwrap();
        assert!(matches!(read_dataset(&p), Err(PacketError::MalformedRow { line: 2, .. })));

        let mut vals = vec!["0"; CANONICAL_LEN];
        vals[5] = "1.5";
        std::fs::write(&p, format!("{header}\n{},1\n", vals.join(","))).unwrap();
        assert!(matches!(read_dataset(&p), Err(PacketError::MalformedRow { .. })));

        vals[5] = "abc";
        std::fs::write(&p, format!("{header}\n{},1\n", vals.join(","))).unwrap();
        assert!(matches!(read_dataset(&p), Err(PacketError::MalformedRow { .. })));
    }
}
