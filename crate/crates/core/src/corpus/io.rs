use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ConfusionMatrix, Dataset, EntityRef, PredicateVocab, PredictionRecord, Predictions, Provenance, RelationId,
    RelationInstance,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct EntityLine {
    class: String,
    seg: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum PredicateField {
    Index(u64),
    Label(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct RelationLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation_id: Option<RelationId>,
    sub: EntityLine,
    obj: EntityLine,
    predicate: PredicateField,
    #[serde(default, skip_serializing_if = "is_original")]
    provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct NaLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation_id: Option<RelationId>,
    sub: EntityLine,
    obj: EntityLine,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    #[serde(default)]
    relations: Vec<RelationLine>,
    #[serde(default)]
    na_pairs: Vec<NaLine>,
}

fn is_original(p: &Provenance) -> bool {
    *p == Provenance::Original
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Reads a JSON array of strings (predicate or entity vocabulary sidecar).
pub fn load_labels(path: &Path) -> Result<Vec<String>> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

pub fn save_labels(labels: &[String], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer(&mut out, labels).map_err(|e| Error::Validation(e.to_string()))?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path, vocab: PredicateVocab, entity_vocab: Vec<String>) -> Result<Dataset> {
    parse_dataset(open(path)?, path, vocab, entity_vocab)
}

/// Parses the one-image-per-line JSONL format. Missing relation ids are
/// assigned in file order after the largest explicit id.
pub fn parse_dataset(
    reader: impl BufRead,
    origin: &Path,
    vocab: PredicateVocab,
    entity_vocab: Vec<String>,
) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut pending: Vec<(usize, ImageLine)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ImageLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(origin, line_no, e.to_string()))?;
        pending.push((line_no, parsed));
    }

    let explicit_max = pending
        .iter()
        .flat_map(|(_, img)| {
            img.relations
                .iter()
                .filter_map(|r| r.relation_id)
                .chain(img.na_pairs.iter().filter_map(|r| r.relation_id))
        })
        .max();
    let mut next_id = explicit_max.map_or(0, |m| m + 1);
    let mut assign = |explicit: Option<RelationId>| {
        explicit.unwrap_or_else(|| {
            let id = next_id;
            next_id += 1;
            id
        })
    };

    let q = vocab.len() as u64;
    let mut relations = Vec::new();
    let mut na_pairs = Vec::new();
    for (line_no, img) in pending {
        for r in img.relations {
            let predicate = match &r.predicate {
                PredicateField::Label(label) => vocab
                    .id(label)
                    .ok_or_else(|| Error::Vocabulary(format!("line {line_no}: unknown predicate `{label}`")))?,
                PredicateField::Index(i) if *i < q => *i as usize,
                PredicateField::Index(i) => {
                    return Err(Error::Vocabulary(format!(
                        "line {line_no}: predicate index {i} out of range (Q = {q})"
                    )))
                }
            };
            relations.push(RelationInstance {
                relation_id: assign(r.relation_id),
                image_id: img.image_id.clone(),
                subject: EntityRef::new(r.sub.class, r.sub.seg),
                object: EntityRef::new(r.obj.class, r.obj.seg),
                predicate: Some(predicate),
                provenance: r.provenance,
            });
        }
        for r in img.na_pairs {
            na_pairs.push(RelationInstance {
                relation_id: assign(r.relation_id),
                image_id: img.image_id.clone(),
                subject: EntityRef::new(r.sub.class, r.sub.seg),
                object: EntityRef::new(r.obj.class, r.obj.seg),
                predicate: None,
                provenance: Provenance::Original,
            });
        }
        images.push(img.image_id);
    }
    Dataset::new(vocab, entity_vocab, images, relations, na_pairs)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    write_dataset(dataset, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes one line per image, relations grouped under their image in dataset order.
pub fn write_dataset(dataset: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    for image in &dataset.images {
        let entity = |e: &EntityRef| EntityLine {
            class: e.class_label.clone(),
            seg: e.segment_id.clone(),
        };
        let line = ImageLine {
            image_id: image.clone(),
            relations: dataset
                .relations
                .iter()
                .filter(|r| &r.image_id == image)
                .map(|r| RelationLine {
                    relation_id: Some(r.relation_id),
                    sub: entity(&r.subject),
                    obj: entity(&r.object),
                    predicate: PredicateField::Label(dataset.vocab.label(r.predicate.expect("annotated")).to_string()),
                    provenance: r.provenance,
                })
                .collect(),
            na_pairs: dataset
                .na_pairs
                .iter()
                .filter(|r| &r.image_id == image)
                .map(|r| NaLine {
                    relation_id: Some(r.relation_id),
                    sub: entity(&r.subject),
                    obj: entity(&r.object),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &line)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path, q: usize) -> Result<Predictions> {
    parse_predictions(open(path)?, path, q)
}

pub fn parse_predictions(reader: impl BufRead, origin: &Path, q: usize) -> Result<Predictions> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        record
            .validate(q)
            .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        if !seen.insert(record.relation_id) {
            return Err(Error::parse(
                origin,
                i + 1,
                format!("duplicate prediction for relation {}", record.relation_id),
            ));
        }
        records.push(record);
    }
    Predictions::new(records, q)
}

pub fn write_predictions<'a>(
    records: impl IntoIterator<Item = &'a PredictionRecord>,
    out: &mut impl Write,
) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut *out, record)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_confusion(path: &Path, vocab: &PredicateVocab) -> Result<ConfusionMatrix> {
    parse_confusion(open(path)?, path, vocab)
}

/// Header row must list the predicate labels in vocabulary order.
pub fn parse_confusion(reader: impl Read, origin: &Path, vocab: &PredicateVocab) -> Result<ConfusionMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(origin, 1, e.to_string()))?
        .clone();
    if header.iter().ne(vocab.labels().iter().map(String::as_str)) {
        return Err(Error::Vocabulary(format!(
            "{}: confusion header does not match the predicate vocabulary",
            origin.display()
        )));
    }
    let mut rows = Vec::with_capacity(vocab.len());
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(origin, line, e.to_string()))?;
        let row = record
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(origin, line, e.to_string()))?;
        rows.push(row);
    }
    if rows.len() != vocab.len() {
        return Err(Error::Validation(format!(
            "{}: confusion matrix has {} rows, expected {}",
            origin.display(),
            rows.len(),
            vocab.len()
        )));
    }
    ConfusionMatrix::new(rows)
}

pub fn write_confusion(matrix: &ConfusionMatrix, vocab: &PredicateVocab, out: impl Write) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(vocab.labels())?;
    for i in 0..matrix.dim() {
        wtr.write_record(matrix.row(i).iter().map(|v| v.to_string()))?;
    }
    wtr.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn vocab() -> PredicateVocab {
        PredicateVocab::new(vec!["on".into(), "standing on".into(), "near".into()]).unwrap()
    }

    const SAMPLE: &str = r#"{"image_id":"a","relations":[{"sub":{"class":"person","seg":"1"},"obj":{"class":"snow","seg":"2"},"predicate":"standing on"}],"na_pairs":[{"sub":{"class":"snow","seg":"2"},"obj":{"class":"person","seg":"1"}}]}
{"image_id":"b","relations":[{"relation_id":10,"sub":{"class":"dog","seg":"1"},"obj":{"class":"tree","seg":"2"},"predicate":"near"}]}
{"image_id":"c"}
"#;

    fn parse(text: &str) -> Result<Dataset> {
        parse_dataset(Cursor::new(text), Path::new("mem"), vocab(), vec![])
    }

    #[test]
    fn parses_and_assigns_ids_after_explicit_max() {
        let d = parse(SAMPLE).unwrap();
        assert_eq!(d.images, vec!["a", "b", "c"]);
        assert_eq!(d.relations.len(), 2);
        assert_eq!(d.relations[0].relation_id, 11);
        assert_eq!(d.relations[0].predicate, Some(1));
        assert_eq!(d.na_pairs[0].relation_id, 12);
        assert_eq!(d.relations[1].relation_id, 10);
    }

    #[test]
    fn empty_relations_file() {
        let d = parse("{\"image_id\":\"x\",\"relations\":[]}\n").unwrap();
        assert!(d.relations.is_empty());
        assert_eq!(d.images.len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"image_id\":\"x\"}\n{not json}\n";
        match parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_and_index_q_are_vocabulary_errors() {
        let bad_label = r#"{"image_id":"x","relations":[{"sub":{"class":"a","seg":"1"},"obj":{"class":"b","seg":"2"},"predicate":"flying"}]}"#;
        assert!(matches!(parse(bad_label), Err(Error::Vocabulary(_))));
        let bad_index = r#"{"image_id":"x","relations":[{"sub":{"class":"a","seg":"1"},"obj":{"class":"b","seg":"2"},"predicate":3}]}"#;
        assert!(matches!(parse(bad_index), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn save_then_load_is_identity() {
        let mut d = parse(SAMPLE).unwrap();
        d.relations[1].provenance = Provenance::Transferred;
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = parse_dataset(Cursor::new(buf), Path::new("mem"), vocab(), vec![]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn confusion_header_must_match() {
        let ok = "on,standing on,near\n0.5,0.3,0.2\n0.4,0.5,0.1\n0,0,1\n";
        let c = parse_confusion(Cursor::new(ok), Path::new("c.csv"), &vocab()).unwrap();
        assert_eq!(c.get(1, 0), 0.4);
        let bad = "near,on,standing on\n0.5,0.3,0.2\n0.4,0.5,0.1\n0,0,1\n";
        assert!(parse_confusion(Cursor::new(bad), Path::new("c.csv"), &vocab()).is_err());
        let short = "on,standing on,near\n0.5,0.3,0.2\n";
        assert!(parse_confusion(Cursor::new(short), Path::new("c.csv"), &vocab()).is_err());
    }

    #[test]
    fn prediction_lines_validate() {
        let text = "{\"relation_id\":1,\"scores\":[0.1,0.2,0.7],\"na_score\":0.3}\n";
        let p = parse_predictions(Cursor::new(text), Path::new("p"), 3).unwrap();
        assert_eq!(p.get(1).unwrap().argmax(), 2);
        let bad = "{\"relation_id\":1,\"scores\":[0.1,0.2,0.7],\"na_score\":0.0}\n";
        assert!(parse_predictions(Cursor::new(bad), Path::new("p"), 3).is_err());
    }
}
