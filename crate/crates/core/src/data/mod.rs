//! Interaction logs: ingestion, encoding, splitting and windowing.

mod synth;
mod window;

pub use synth::{generate_synthetic, SynthConfig};
pub use window::{encode_window, window_sequences, EncodedWindow};

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KtError, Result};

/// Default maximum sequence length for attention models.
pub const DEFAULT_WINDOW: usize = 50;

/// One attempt of one student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub exercise: u32,
    pub skill: u32,
    pub correct: bool,
    pub timestamp_ms: u64,
}

/// All interactions of one student, sorted by time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentLog {
    pub student_id: String,
    pub interactions: Vec<Interaction>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub students: Vec<StudentLog>,
}

impl InteractionLog {
    pub fn num_interactions(&self) -> usize {
        self.students.iter().map(|s| s.interactions.len()).sum()
    }

    /// Largest exercise id plus one.
    pub fn num_exercises(&self) -> usize {
        self.iter_all()
            .map(|x| x.exercise as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn num_skills(&self) -> usize {
        self.iter_all()
            .map(|x| x.skill as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Dense `exercise -> skill` table using the first tag seen for each
    /// exercise. Exercises that never occur get a private placeholder tag
    /// (`u32::MAX - exercise`) so they share a skill with nothing.
    pub fn skill_table(&self, num_exercises: usize) -> Vec<u32> {
        let mut t = untagged_skills(num_exercises);
        let mut seen = vec![false; num_exercises];
        for x in self.iter_all() {
            let e = x.exercise as usize;
            if e < num_exercises && !seen[e] {
                seen[e] = true;
                t[e] = x.skill;
            }
        }
        t
    }

    fn iter_all(&self) -> impl Iterator<Item = &Interaction> {
        self.students.iter().flat_map(|s| s.interactions.iter())
    }

    /// Writes the log as CSV with the canonical header, student by student.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| KtError::Csv {
            path: path.into(),
            source: e,
        })?;
        let csv_err = |e| KtError::Csv {
            path: path.into(),
            source: e,
        };
        w.write_record(ColumnMapping::default().names())
            .map_err(csv_err)?;
        for s in &self.students {
            for x in &s.interactions {
                w.write_record([
                    s.student_id.as_str(),
                    &x.timestamp_ms.to_string(),
                    &x.exercise.to_string(),
                    &x.skill.to_string(),
                    if x.correct { "1" } else { "0" },
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| KtError::io(path, e))
    }
}

/// `exercise + response * num_exercises`.
pub fn encode_interaction(exercise: u32, correct: bool, num_exercises: usize) -> Result<u32> {
    if exercise as usize >= num_exercises {
        return Err(KtError::Index {
            what: "exercise id",
            index: exercise as usize,
            size: num_exercises,
        });
    }
    Ok(exercise + u32::from(correct) * num_exercises as u32)
}

pub fn decode_interaction(id: u32, num_exercises: usize) -> (u32, bool) {
    let e = num_exercises as u32;
    (id % e, id >= e)
}

/// Column names of the input CSV. The defaults are the canonical schema
/// `student_id,timestamp_ms,exercise_id,skill_tag,response`; other dumps
/// (e.g. EdNet's) are read by renaming.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub student_id: String,
    pub timestamp_ms: String,
    pub exercise_id: String,
    pub skill_tag: String,
    pub response: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            student_id: "student_id".into(),
            timestamp_ms: "timestamp_ms".into(),
            exercise_id: "exercise_id".into(),
            skill_tag: "skill_tag".into(),
            response: "response".into(),
        }
    }
}

impl ColumnMapping {
    fn names(&self) -> [&str; 5] {
        [
            &self.student_id,
            &self.timestamp_ms,
            &self.exercise_id,
            &self.skill_tag,
            &self.response,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rejected: Vec<RejectedRow>,
    /// Exercises seen with more than one skill tag; the first tag wins.
    pub skill_conflicts: usize,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub log: InteractionLog,
    pub report: IngestReport,
}

/// Reads an interaction CSV. Malformed rows are skipped and listed in the
/// report; a missing column in the header is an error.
pub fn ingest_log(path: &Path, schema: &ColumnMapping) -> Result<Ingested> {
    let bytes = fs::read(path).map_err(|e| KtError::io(path, e))?;
    let csv_err = |e| KtError::Csv {
        path: path.into(),
        source: e,
    };
    let mut report = IngestReport::default();
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(Ingested {
            manifest: DatasetManifest::empty(DEFAULT_WINDOW),
            log: InteractionLog::default(),
            report,
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let header = reader.headers().map_err(csv_err)?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(schema.names()) {
        *slot = header.iter().position(|h| h == name).ok_or_else(|| {
            KtError::Data(format!(
                "{}: header lacks column `{name}` (found {:?})",
                path.display(),
                header.iter().collect::<Vec<_>>()
            ))
        })?;
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_student: HashMap<String, Vec<Interaction>> = HashMap::new();
    let mut skill_of: BTreeMap<u32, u32> = BTreeMap::new();
    for record in reader.records() {
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                report.rejected.push(RejectedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        let parsed = parse_row(&record, &cols);
        let (student, x) = match parsed {
            Ok(v) => v,
            Err(reason) => {
                report.rejected.push(RejectedRow { line, reason });
                continue;
            }
        };
        match skill_of.get(&x.exercise) {
            Some(&s) if s != x.skill => report.skill_conflicts += 1,
            Some(_) => {}
            None => {
                skill_of.insert(x.exercise, x.skill);
            }
        }
        if !by_student.contains_key(&student) {
            order.push(student.clone());
        }
        by_student.entry(student).or_default().push(x);
    }

    let students = order
        .into_iter()
        .map(|id| {
            let mut interactions = by_student.remove(&id).unwrap_or_default();
            // stable: ties keep file order
            interactions.sort_by_key(|x| x.timestamp_ms);
            StudentLog {
                student_id: id,
                interactions,
            }
        })
        .collect();
    let log = InteractionLog { students };
    let manifest = DatasetManifest {
        num_exercises: log.num_exercises(),
        num_skills: log.num_skills(),
        skill_of,
        window: DEFAULT_WINDOW,
        split: BTreeMap::new(),
    };
    Ok(Ingested {
        manifest,
        log,
        report,
    })
}

fn parse_row(
    record: &csv::StringRecord,
    cols: &[usize; 5],
) -> std::result::Result<(String, Interaction), String> {
    let field = |i: usize| {
        record
            .get(cols[i])
            .ok_or_else(|| format!("missing field {}", i + 1))
    };
    let int = |i: usize, name: &str| -> std::result::Result<u64, String> {
        let raw = field(i)?;
        raw.parse::<u64>()
            .map_err(|_| format!("parse error: {name} `{raw}` is not a nonnegative integer"))
    };
    let student = field(0)?.to_string();
    if student.is_empty() {
        return Err("empty student_id".into());
    }
    let timestamp_ms = int(1, "timestamp_ms")?;
    let exercise = int(2, "exercise_id")?;
    let skill = int(3, "skill_tag")?;
    let response = int(4, "response")?;
    if response > 1 {
        return Err(format!("response {response} outside {{0,1}}"));
    }
    let exercise = u32::try_from(exercise).map_err(|_| "exercise_id too large".to_string())?;
    let skill = u32::try_from(skill).map_err(|_| "skill_tag too large".to_string())?;
    Ok((
        student,
        Interaction {
            exercise,
            skill,
            correct: response == 1,
            timestamp_ms,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

fn untagged_skills(num_exercises: usize) -> Vec<u32> {
    (0..num_exercises).map(|e| u32::MAX - e as u32).collect()
}

/// Deterministic student-level split. `test_fraction` of all students go
/// to test, then `val_fraction` of the remainder to validation.
pub fn split_students(
    num_students: usize,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Vec<Split> {
    let mut order: Vec<usize> = (0..num_students).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911);
    order.shuffle(&mut rng);
    let n_test = (num_students as f64 * test_fraction).round() as usize;
    let n_val = ((num_students - n_test) as f64 * val_fraction).round() as usize;
    let mut out = vec![Split::Train; num_students];
    for (rank, &s) in order.iter().enumerate() {
        out[s] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Validation
        } else {
            Split::Train
        };
    }
    out
}

/// Dataset-level facts persisted next to a log.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub num_exercises: usize,
    pub num_skills: usize,
    pub skill_of: BTreeMap<u32, u32>,
    pub window: usize,
    pub split: BTreeMap<String, Split>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    exercises: usize,
    skills: usize,
    window: usize,
    skill_of: BTreeMap<String, u32>,
    #[serde(default)]
    split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn empty(window: usize) -> Self {
        DatasetManifest {
            num_exercises: 0,
            num_skills: 0,
            skill_of: BTreeMap::new(),
            window,
            split: BTreeMap::new(),
        }
    }

    /// Dense `exercise -> skill` table; see [`InteractionLog::skill_table`]
    /// for exercises without a tag.
    pub fn skill_table(&self) -> Vec<u32> {
        let mut t = untagged_skills(self.num_exercises);
        for (&e, &s) in &self.skill_of {
            if (e as usize) < t.len() {
                t[e as usize] = s;
            }
        }
        t
    }

    pub fn to_toml(&self) -> String {
        let file = ManifestFile {
            exercises: self.num_exercises,
            skills: self.num_skills,
            window: self.window,
            skill_of: self
                .skill_of
                .iter()
                .map(|(e, s)| (e.to_string(), *s))
                .collect(),
            split: self.split.clone(),
        };
        toml::to_string(&file).expect("manifest serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ManifestFile =
            toml::from_str(text).map_err(|e| KtError::Data(format!("manifest: {e}")))?;
        let mut skill_of = BTreeMap::new();
        for (e, s) in file.skill_of {
            let e: u32 = e
                .parse()
                .map_err(|_| KtError::Data(format!("manifest: bad exercise key `{e}`")))?;
            skill_of.insert(e, s);
        }
        Ok(DatasetManifest {
            num_exercises: file.exercises,
            num_skills: file.skills,
            skill_of,
            window: file.window,
            split: file.split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| KtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KtError::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_interaction(3, false, 10).unwrap(), 3);
        assert_eq!(encode_interaction(3, true, 10).unwrap(), 13);
        assert!(encode_interaction(10, false, 10).is_err());
    }

    #[test]
    fn encode_round_trips_exhaustively() {
        let e_count = 17;
        let mut seen = std::collections::HashSet::new();
        for e in 0..e_count as u32 {
            for r in [false, true] {
                let id = encode_interaction(e, r, e_count).unwrap();
                assert!((id as usize) < 2 * e_count);
                assert!(seen.insert(id));
                assert_eq!(decode_interaction(id, e_count), (e, r));
            }
        }
        assert_eq!(seen.len(), 2 * e_count);
    }

    #[test]
    fn ingest_small_file() {
        let f = write_tmp(
            "student_id,timestamp_ms,exercise_id,skill_tag,response\n\
             u1,300,4,1,1\nu1,100,2,0,0\nu1,200,7,1,1\n",
        );
        let got = ingest_log(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(got.log.students.len(), 1);
        let xs = &got.log.students[0].interactions;
        assert_eq!(xs.len(), 3);
        assert_eq!(
            xs.iter().map(|x| x.timestamp_ms).collect::<Vec<_>>(),
            [100, 200, 300]
        );
        assert_eq!(got.manifest.num_exercises, 8);
        assert_eq!(got.manifest.num_skills, 2);
        assert_eq!(got.manifest.skill_of[&7], 1);
        assert!(got.report.rejected.is_empty());
    }

    #[test]
    fn ingest_empty_file() {
        let f = write_tmp("");
        let got = ingest_log(f.path(), &ColumnMapping::default()).unwrap();
        assert!(got.log.students.is_empty());
        assert_eq!(got.manifest.num_exercises, 0);
    }

    #[test]
    fn ingest_reports_corrupt_rows_by_line() {
        let mut text = String::from("student_id,timestamp_ms,exercise_id,skill_tag,response\n");
        for i in 0..100 {
            if i == 41 {
                text.push_str("u2,17,abc,0,1\n");
            } else {
                text.push_str(&format!("u{},{},{},{},{}\n", i % 3, i, i % 9, i % 2, i % 2));
            }
        }
        let f = write_tmp(&text);
        let got = ingest_log(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(got.log.num_interactions(), 99);
        assert_eq!(got.report.rows_read, 100);
        assert_eq!(got.report.rejected.len(), 1);
        // header is line 1, data row i is line i + 2
        assert_eq!(got.report.rejected[0].line, 43);
        assert!(got.report.rejected[0].reason.contains("exercise_id"));
    }

    #[test]
    fn ingest_rejects_bad_response_and_ties_keep_file_order() {
        let f = write_tmp(
            "student_id,timestamp_ms,exercise_id,skill_tag,response\n\
             a,5,1,0,1\na,5,2,0,0\na,6,3,0,2\n",
        );
        let got = ingest_log(f.path(), &ColumnMapping::default()).unwrap();
        let ex: Vec<u32> = got.log.students[0]
            .interactions
            .iter()
            .map(|x| x.exercise)
            .collect();
        assert_eq!(ex, [1, 2]);
        assert_eq!(got.report.rejected.len(), 1);
        assert!(got.report.rejected[0].reason.contains("response"));
    }

    #[test]
    fn ingest_with_renamed_columns() {
        let f = write_tmp("user,ts,q,tag,ok\nx,1,0,0,1\n");
        let schema = ColumnMapping {
            student_id: "user".into(),
            timestamp_ms: "ts".into(),
            exercise_id: "q".into(),
            skill_tag: "tag".into(),
            response: "ok".into(),
        };
        let got = ingest_log(f.path(), &schema).unwrap();
        assert_eq!(got.log.num_interactions(), 1);
        assert!(ingest_log(f.path(), &ColumnMapping::default()).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = DatasetManifest::empty(50);
        m.num_exercises = 3;
        m.num_skills = 2;
        m.skill_of.insert(0, 1);
        m.skill_of.insert(2, 0);
        m.split.insert("s1".into(), Split::Test);
        let back = DatasetManifest::from_toml(&m.to_toml()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.skill_table(), vec![1, u32::MAX - 1, 0]);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let a = split_students(100, 0.2, 0.1, 7);
        let b = split_students(100, 0.2, 0.1, 7);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| **s == Split::Test).count(), 20);
        assert_eq!(a.iter().filter(|s| **s == Split::Validation).count(), 8);
        assert_ne!(a, split_students(100, 0.2, 0.1, 8));
    }
}
