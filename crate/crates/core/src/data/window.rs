use super::{encode_interaction, Interaction, StudentLog};

/// A fixed-length, left-padded training/evaluation example.
///
/// Slot `j` holds the previous interaction as input and the following
/// exercise as prediction target, so the input never contains the label it
/// is asked to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedWindow {
    /// Index of the student in the source log.
    pub student: usize,
    /// Encoded input interaction `exercise + response * E`; 0 on padding.
    pub interaction_ids: Vec<u32>,
    /// Target exercise, one position ahead of the input.
    pub exercise_ids: Vec<u32>,
    /// Response to the target exercise.
    pub labels: Vec<u8>,
    /// Time of the input interaction.
    pub timestamps: Vec<u64>,
    /// Time at which the target exercise is attempted.
    pub target_timestamps: Vec<u64>,
    pub valid_mask: Vec<bool>,
}

impl EncodedWindow {
    pub fn len(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_mask.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// First non-padding slot; equals `len()` for an all-padding window.
    pub fn first_valid(&self) -> usize {
        self.len() - self.n_valid()
    }

    /// Exercise of the input interaction at slot `j`.
    pub fn input_exercise(&self, j: usize, num_exercises: usize) -> u32 {
        self.interaction_ids[j] % num_exercises as u32
    }
}

/// Encodes up to `len` consecutive interactions of one student into a
/// window of `len` slots. The first interaction is only ever an input.
pub fn encode_window(
    student: usize,
    chunk: &[Interaction],
    num_exercises: usize,
    len: usize,
) -> EncodedWindow {
    assert!(len >= 2, "window length must be at least 2");
    assert!(chunk.len() <= len, "chunk longer than window");
    let n_valid = chunk.len().saturating_sub(1);
    let pad = len - n_valid;
    let mut w = EncodedWindow {
        student,
        interaction_ids: vec![0; len],
        exercise_ids: vec![0; len],
        labels: vec![0; len],
        timestamps: vec![0; len],
        target_timestamps: vec![0; len],
        valid_mask: vec![false; len],
    };
    for k in 0..n_valid {
        let (prev, next) = (&chunk[k], &chunk[k + 1]);
        let j = pad + k;
        w.interaction_ids[j] = encode_interaction(prev.exercise, prev.correct, num_exercises)
            .expect("exercise id within declared range");
        w.exercise_ids[j] = next.exercise;
        w.labels[j] = u8::from(next.correct);
        w.timestamps[j] = prev.timestamp_ms;
        w.target_timestamps[j] = next.timestamp_ms;
        w.valid_mask[j] = true;
    }
    w
}

/// Splits every student's sequence into consecutive non-overlapping chunks
/// of at most `len` interactions. `students` yields `(student index, log)`.
pub fn window_sequences<'a>(
    students: impl IntoIterator<Item = (usize, &'a StudentLog)>,
    num_exercises: usize,
    len: usize,
) -> Vec<EncodedWindow> {
    assert!(len >= 2, "window length must be at least 2");
    let mut out = Vec::new();
    for (idx, s) in students {
        for chunk in s.interactions.chunks(len) {
            if chunk.len() >= 2 {
                out.push(encode_window(idx, chunk, num_exercises, len));
            }
        }
    }
    out
}
