use crate::error::{Error, Result};

/// Row-major matrix of token ids, one sequence per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    ids: Vec<usize>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(Error::Input(format!(
                "token matrix {rows}x{cols} needs {} ids, got {}",
                rows * cols,
                ids.len()
            )));
        }
        Ok(Self { rows, cols, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("token rows have different lengths".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            ids.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            ids,
        }
    }

    /// Rows `start..start + len`.
    pub fn range(&self, start: usize, len: usize) -> Self {
        Self {
            rows: len,
            cols: self.cols,
            ids: self.ids[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }
}

/// Paired images and captions with their class labels. Row `i` of each field belongs
/// to the same sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub image_tokens: TokenMatrix,
    pub text_tokens: TokenMatrix,
    pub class_labels: Vec<usize>,
}

impl Batch {
    pub fn new(image_tokens: TokenMatrix, text_tokens: TokenMatrix, class_labels: Vec<usize>) -> Result<Self> {
        if image_tokens.rows() != text_tokens.rows() || image_tokens.rows() != class_labels.len() {
            return Err(Error::Input(format!(
                "batch parts disagree: {} images, {} captions, {} labels",
                image_tokens.rows(),
                text_tokens.rows(),
                class_labels.len()
            )));
        }
        Ok(Self {
            image_tokens,
            text_tokens,
            class_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }
}
