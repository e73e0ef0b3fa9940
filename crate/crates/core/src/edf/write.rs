//! Fixture-grade EDF/EDF+ serializer. Produces canonical space-padded
//! headers so that write → parse → write is byte-stable. Not a general
//! EDF authoring tool.

use super::{EdfError, EdfFile, HypnogramAnnotation};

fn push_field(out: &mut Vec<u8>, value: &str, width: usize, what: &str) {
    assert!(value.is_ascii(), "EDF header field {what} must be ASCII: {value:?}");
    assert!(
        value.len() <= width,
        "EDF header field {what} = {value:?} exceeds {width} bytes"
    );
    out.extend_from_slice(value.as_bytes());
    out.extend(std::iter::repeat(b' ').take(width - value.len()));
}

/// Shortest decimal representation that survives an f64 round-trip within
/// the given width. Integral values are written without a decimal point.
fn format_real(value: f64, width: usize, what: &str) -> String {
    if value == value.trunc() && value.abs() < 1e8 {
        let s = format!("{}", value as i64);
        assert!(s.len() <= width, "field {what} = {value} does not fit {width} bytes");
        return s;
    }
    for precision in (0..=7).rev() {
        let s = format!("{value:.precision$}");
        if s.len() <= width {
            return s;
        }
    }
    panic!("field {what} = {value} does not fit {width} bytes");
}

pub(super) fn edf_to_bytes(file: &EdfFile) -> Vec<u8> {
    let h = &file.header;
    let ns = file.signals.len();
    assert_eq!(ns, h.signal_count, "signal_count disagrees with specs");
    assert_eq!(ns, file.digital.len(), "digital sample vectors disagree with specs");

    let mut out = Vec::with_capacity(h.header_bytes);
    push_field(&mut out, &h.version_tag, 8, "version");
    push_field(&mut out, &h.patient_id, 80, "patient id");
    push_field(&mut out, &h.recording_id, 80, "recording id");
    let d = h.start_datetime;
    push_field(&mut out, &format!("{:02}.{:02}.{:02}", d.day, d.month, d.year % 100), 8, "date");
    push_field(&mut out, &format!("{:02}.{:02}.{:02}", d.hour, d.minute, d.second), 8, "time");
    push_field(&mut out, &format!("{}", 256 + 256 * ns), 8, "header bytes");
    push_field(&mut out, &h.reserved, 44, "reserved");
    push_field(&mut out, &format!("{}", h.record_count), 8, "record count");
    push_field(&mut out, &format_real(h.record_duration_s, 8, "record duration"), 8, "record duration");
    push_field(&mut out, &format!("{ns}"), 4, "signal count");

    for s in &file.signals {
        push_field(&mut out, &s.label, 16, "label");
    }
    for s in &file.signals {
        push_field(&mut out, &s.transducer, 80, "transducer");
    }
    for s in &file.signals {
        push_field(&mut out, &s.physical_dimension, 8, "dimension");
    }
    for s in &file.signals {
        push_field(&mut out, &format_real(s.physical_min, 8, "physical min"), 8, "physical min");
    }
    for s in &file.signals {
        push_field(&mut out, &format_real(s.physical_max, 8, "physical max"), 8, "physical max");
    }
    for s in &file.signals {
        push_field(&mut out, &format!("{}", s.digital_min), 8, "digital min");
    }
    for s in &file.signals {
        push_field(&mut out, &format!("{}", s.digital_max), 8, "digital max");
    }
    for s in &file.signals {
        push_field(&mut out, &s.prefiltering, 80, "prefilter");
    }
    for s in &file.signals {
        push_field(&mut out, &format!("{}", s.samples_per_record), 8, "spr");
    }
    for _ in &file.signals {
        push_field(&mut out, "", 32, "signal reserved");
    }

    for r in 0..h.record_count {
        for (sig, samples) in file.signals.iter().zip(&file.digital) {
            let n = sig.samples_per_record;
            assert_eq!(
                samples.len(),
                n * h.record_count,
                "signal {:?} sample count does not match record layout",
                sig.label
            );
            for &v in &samples[r * n..(r + 1) * n] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn format_seconds(value: f64) -> String {
    if value == value.trunc() {
        format!("{}", value as i64)
    } else {
        let mut s = format!("{value:.6}");
        while s.ends_with('0') {
            s.pop();
        }
        s
    }
}

/// Encode hypnogram annotations into an EDF+ annotation signal.
///
/// Every record starts with its timestamp TAL; each annotation is stored in
/// the last record whose start time is <= its onset. Errors if a record's
/// TALs do not fit in `samples_per_record * 2` bytes.
pub fn encode_annotation_signal(
    record_starts: &[f64],
    annotations: &[HypnogramAnnotation],
    samples_per_record: usize,
) -> Result<Vec<i16>, EdfError> {
    let record_bytes = samples_per_record * 2;
    let mut per_record: Vec<Vec<u8>> = record_starts
        .iter()
        .map(|t| {
            let mut b = format!("+{}\x14\x14", format_seconds(*t)).into_bytes();
            b.push(0x00);
            b
        })
        .collect();

    for ann in annotations {
        let idx = record_starts
            .iter()
            .rposition(|&t| t <= ann.onset_s + 1e-9)
            .ok_or_else(|| {
                EdfError::MalformedAnnotation(format!(
                    "annotation onset {} precedes every record",
                    ann.onset_s
                ))
            })?;
        let tal = format!(
            "+{}\x15{}\x14{}\x14",
            format_seconds(ann.onset_s),
            format_seconds(ann.duration_s),
            ann.stage_text
        );
        per_record[idx].extend_from_slice(tal.as_bytes());
        per_record[idx].push(0x00);
    }

    let mut bytes = Vec::with_capacity(record_bytes * record_starts.len());
    for (i, mut rec) in per_record.into_iter().enumerate() {
        if rec.len() > record_bytes {
            return Err(EdfError::MalformedAnnotation(format!(
                "record {i}: TALs need {} bytes but the annotation signal holds {record_bytes}",
                rec.len()
            )));
        }
        rec.resize(record_bytes, 0x00);
        bytes.extend_from_slice(&rec);
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::parse::decode_annotation_signal;
    use super::*;

    #[test]
    fn annotation_signal_round_trips() {
        let anns = vec![
            HypnogramAnnotation { onset_s: 0.0, duration_s: 30.0, stage_text: "Sleep stage W".into() },
            HypnogramAnnotation { onset_s: 30.0, duration_s: 60.0, stage_text: "Sleep stage 2".into() },
        ];
        let starts = [0.0, 30.0, 60.0];
        let samples = encode_annotation_signal(&starts, &anns, 40).unwrap();
        assert_eq!(samples.len(), 40 * 3);
        let decoded = decode_annotation_signal(&samples, 40, 3).unwrap();
        assert_eq!(decoded, anns);
    }

    #[test]
    fn overflowing_record_errs() {
        let anns = vec![HypnogramAnnotation {
            onset_s: 0.0,
            duration_s: 30.0,
            stage_text: "Sleep stage W".repeat(10),
        }];
        assert!(encode_annotation_signal(&[0.0], &anns, 8).is_err());
    }
}
