//! Byte-level EDF/EDF+ reader.

use super::{EdfError, EdfFile, EdfHeader, HypnogramAnnotation, SignalSpec, StartDateTime};

const FIXED_HEADER: usize = 256;
const PER_SIGNAL_HEADER: usize = 256;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EdfError> {
        if self.pos + n > self.bytes.len() {
            return Err(EdfError::MalformedHeader(format!(
                "unexpected end of header while reading {what}"
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn ascii(&mut self, n: usize, what: &str) -> Result<String, EdfError> {
        let raw = self.take(n, what)?;
        if !raw.is_ascii() {
            return Err(EdfError::MalformedHeader(format!(
                "non-ASCII bytes in header field {what}"
            )));
        }
        Ok(std::str::from_utf8(raw).unwrap().trim_end_matches(' ').to_string())
    }
}

fn parse_int(text: &str, what: &str) -> Result<i64, EdfError> {
    text.trim()
        .parse::<i64>()
        .map_err(|_| EdfError::MalformedHeader(format!("field {what} is not an integer: {text:?}")))
}

fn parse_real(text: &str, what: &str) -> Result<f64, EdfError> {
    text.trim()
        .parse::<f64>()
        .map_err(|_| EdfError::MalformedHeader(format!("field {what} is not a number: {text:?}")))
}

fn parse_date_time(date: &str, time: &str) -> Result<StartDateTime, EdfError> {
    let split = |s: &str, what: &str| -> Result<[u8; 3], EdfError> {
        let parts: Vec<&str> = s.trim().split('.').collect();
        if parts.len() != 3 {
            return Err(EdfError::MalformedHeader(format!("bad {what}: {s:?}")));
        }
        let mut out = [0u8; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p.parse::<u8>().map_err(|_| {
                EdfError::MalformedHeader(format!("bad {what} component: {p:?}"))
            })?;
        }
        Ok(out)
    };
    let [day, month, yy] = split(date, "start date")?;
    let [hour, minute, second] = split(time, "start time")?;
    // EDF clipping pivot: 85..=99 are 20th century.
    let year = if yy >= 85 { 1900 + yy as u16 } else { 2000 + yy as u16 };
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return Err(EdfError::MalformedHeader(format!("bad start date: {date:?}")));
    }
    if hour > 23 || minute > 59 || second > 59 {
        return Err(EdfError::MalformedHeader(format!("bad start time: {time:?}")));
    }
    Ok(StartDateTime { year, month, day, hour, minute, second })
}

pub fn parse_edf_file(bytes: &[u8]) -> Result<EdfFile, EdfError> {
    if bytes.len() < FIXED_HEADER {
        return Err(EdfError::MalformedHeader(format!(
            "file is {} bytes, shorter than the 256-byte fixed header",
            bytes.len()
        )));
    }
    let mut cur = Cursor { bytes, pos: 0 };

    let version_tag = cur.ascii(8, "version")?;
    let patient_id = cur.ascii(80, "patient id")?;
    let recording_id = cur.ascii(80, "recording id")?;
    let date = cur.ascii(8, "start date")?;
    let time = cur.ascii(8, "start time")?;
    let header_bytes = parse_int(&cur.ascii(8, "header bytes")?, "header bytes")?;
    let reserved = cur.ascii(44, "reserved")?;
    let record_count = parse_int(&cur.ascii(8, "record count")?, "record count")?;
    let record_duration_s = parse_real(&cur.ascii(8, "record duration")?, "record duration")?;
    let signal_count = parse_int(&cur.ascii(4, "signal count")?, "signal count")?;

    if signal_count < 1 {
        return Err(EdfError::MalformedHeader(format!(
            "signal count must be >= 1, found {signal_count}"
        )));
    }
    if record_count < 0 {
        return Err(EdfError::MalformedHeader(format!(
            "record count must be >= 0, found {record_count}"
        )));
    }
    if record_duration_s <= 0.0 {
        return Err(EdfError::MalformedHeader(format!(
            "record duration must be positive, found {record_duration_s}"
        )));
    }
    let ns = signal_count as usize;
    let expected_header = FIXED_HEADER + PER_SIGNAL_HEADER * ns;
    if header_bytes as usize != expected_header {
        return Err(EdfError::MalformedHeader(format!(
            "header byte count {header_bytes} != 256 + 256 * {ns}"
        )));
    }
    if bytes.len() < expected_header {
        return Err(EdfError::MalformedHeader(format!(
            "file is {} bytes, shorter than the declared {expected_header}-byte header",
            bytes.len()
        )));
    }

    // Signal headers are stored field-major: all labels, all transducers, ...
    let mut labels = Vec::with_capacity(ns);
    let mut transducers = Vec::with_capacity(ns);
    let mut dims = Vec::with_capacity(ns);
    let mut pmins = Vec::with_capacity(ns);
    let mut pmaxs = Vec::with_capacity(ns);
    let mut dmins = Vec::with_capacity(ns);
    let mut dmaxs = Vec::with_capacity(ns);
    let mut prefilters = Vec::with_capacity(ns);
    let mut sprs = Vec::with_capacity(ns);
    for i in 0..ns {
        labels.push(cur.ascii(16, &format!("label[{i}]"))?);
    }
    for i in 0..ns {
        transducers.push(cur.ascii(80, &format!("transducer[{i}]"))?);
    }
    for i in 0..ns {
        dims.push(cur.ascii(8, &format!("dimension[{i}]"))?);
    }
    for i in 0..ns {
        pmins.push(parse_real(&cur.ascii(8, "physical min")?, &format!("physical min[{i}]"))?);
    }
    for i in 0..ns {
        pmaxs.push(parse_real(&cur.ascii(8, "physical max")?, &format!("physical max[{i}]"))?);
    }
    for i in 0..ns {
        dmins.push(parse_int(&cur.ascii(8, "digital min")?, &format!("digital min[{i}]"))?);
    }
    for i in 0..ns {
        dmaxs.push(parse_int(&cur.ascii(8, "digital max")?, &format!("digital max[{i}]"))?);
    }
    for i in 0..ns {
        prefilters.push(cur.ascii(80, &format!("prefilter[{i}]"))?);
    }
    for i in 0..ns {
        sprs.push(parse_int(&cur.ascii(8, "samples per record")?, &format!("spr[{i}]"))?);
    }
    cur.take(32 * ns, "signal reserved")?;

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let spec = SignalSpec {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: pmins[i],
            physical_max: pmaxs[i],
            digital_min: dmins[i] as i32,
            digital_max: dmaxs[i] as i32,
            prefiltering: prefilters[i].clone(),
            samples_per_record: sprs[i].max(0) as usize,
        };
        spec.validate(i)?;
        signals.push(spec);
    }

    let header = EdfHeader {
        version_tag,
        patient_id,
        recording_id,
        start_datetime: parse_date_time(&date, &time)?,
        header_bytes: expected_header,
        reserved,
        record_count: record_count as usize,
        record_duration_s,
        signal_count: ns,
    };

    // Data region: record-major, signal-blocked 16-bit LE samples.
    let samples_per_signal_record: Vec<usize> =
        signals.iter().map(|s| s.samples_per_record).collect();
    let record_bytes: usize = samples_per_signal_record.iter().map(|n| n * 2).sum();
    let expected_data = record_bytes * header.record_count;
    let data = &bytes[expected_header..];
    if data.len() < expected_data {
        return Err(EdfError::TruncatedData { expected: expected_data, actual: data.len() });
    }
    if data.len() > expected_data {
        return Err(EdfError::MalformedHeader(format!(
            "{} trailing bytes after the last declared data record",
            data.len() - expected_data
        )));
    }

    let mut digital: Vec<Vec<i16>> = signals
        .iter()
        .map(|s| Vec::with_capacity(s.samples_per_record * header.record_count))
        .collect();
    let mut off = 0;
    for _ in 0..header.record_count {
        for (sig, &n) in samples_per_signal_record.iter().enumerate() {
            let block = &data[off..off + n * 2];
            digital[sig].extend(
                block.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])),
            );
            off += n * 2;
        }
    }

    Ok(EdfFile { header, signals, digital })
}

/// Decode the TAL byte stream of one annotation signal.
///
/// Each record holds TAL chunks separated by 0x00: an onset (with optional
/// 0x15-prefixed duration), then 0x14-terminated annotation texts. Chunks
/// whose texts are all empty are record timestamps and are skipped.
pub fn decode_annotation_signal(
    samples: &[i16],
    samples_per_record: usize,
    record_count: usize,
) -> Result<Vec<HypnogramAnnotation>, EdfError> {
    let mut bytes = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    let record_bytes = samples_per_record * 2;
    let mut out = Vec::new();
    for r in 0..record_count {
        let rec = &bytes[r * record_bytes..(r + 1) * record_bytes];
        for chunk in rec.split(|&b| b == 0x00) {
            if chunk.is_empty() {
                continue;
            }
            out.extend(decode_tal(chunk)?);
        }
    }
    Ok(out)
}

fn decode_tal(chunk: &[u8]) -> Result<Vec<HypnogramAnnotation>, EdfError> {
    let text = |raw: &[u8]| -> Result<String, EdfError> {
        String::from_utf8(raw.to_vec())
            .map_err(|_| EdfError::MalformedAnnotation("annotation text is not UTF-8".into()))
    };
    let mut fields = chunk.split(|&b| b == 0x14);
    let head = fields
        .next()
        .ok_or_else(|| EdfError::MalformedAnnotation("empty TAL".into()))?;
    if head.first() != Some(&b'+') && head.first() != Some(&b'-') {
        return Err(EdfError::MalformedAnnotation(format!(
            "TAL onset must start with '+' or '-', found {:?}",
            text(head)
        )));
    }
    let mut head_parts = head.split(|&b| b == 0x15);
    let onset_text = text(head_parts.next().unwrap())?;
    let onset_s = onset_text.parse::<f64>().map_err(|_| {
        EdfError::MalformedAnnotation(format!("bad TAL onset {onset_text:?}"))
    })?;
    let duration_s = match head_parts.next() {
        Some(raw) => {
            let d = text(raw)?;
            d.parse::<f64>().map_err(|_| {
                EdfError::MalformedAnnotation(format!("bad TAL duration {d:?}"))
            })?
        }
        None => 0.0,
    };

    let mut out = Vec::new();
    for raw in fields {
        if raw.is_empty() {
            continue;
        }
        out.push(HypnogramAnnotation { onset_s, duration_s, stage_text: text(raw)? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tal_with_duration_and_text() {
        let chunk = b"+1800\x1530\x14Sleep stage W\x14";
        let anns = decode_tal(chunk).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].onset_s, 1800.0);
        assert_eq!(anns[0].duration_s, 30.0);
        assert_eq!(anns[0].stage_text, "Sleep stage W");
    }

    #[test]
    fn timestamp_tal_yields_nothing() {
        let anns = decode_tal(b"+42\x14\x14").unwrap();
        assert!(anns.is_empty());
    }

    #[test]
    fn tal_without_plus_errs() {
        assert!(decode_tal(b"42\x14x\x14").is_err());
    }
}
