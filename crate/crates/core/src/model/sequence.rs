use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Boi,
    Eoi,
    Pred,
    LatOpen,
    LatClose,
    Pad,
}

impl Special {
    /// Specials with a row in the shared special-token table. `Pred` tokens
    /// have their own table, one row per suffix slot.
    pub const TABLE: [Special; 7] =
        [Special::Bos, Special::Eos, Special::Boi, Special::Eoi, Special::LatOpen, Special::LatClose, Special::Pad];

    pub fn table_row(self) -> Option<usize> {
        Self::TABLE.iter().position(|&s| s == self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Item {
    Text(usize),
    Patch {
        code: u32,
        row: usize,
        col: usize,
    },
    Special(Special),
    /// Continuous latent slot; its input embedding is supplied at forward time.
    Latent(usize),
}

/// Serialized view of an example with per-position language-modelling
/// targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenSequence {
    pub items: Vec<Item>,
    pub vlm_target: Vec<Option<usize>>,
    pub vlm_mask: Vec<u8>,
    pub segment_id: Vec<u16>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: Item, segment: u16) {
        self.items.push(item);
        self.vlm_target.push(None);
        self.vlm_mask.push(0);
        self.segment_id.push(segment);
    }

    /// Marks the current last position as predicting output class `target`.
    pub fn supervise_last(&mut self, target: usize) {
        if let Some(last) = self.items.len().checked_sub(1) {
            self.vlm_target[last] = Some(target);
            self.vlm_mask[last] = 1;
        }
    }

    pub fn with_pred_suffix(&self, k: usize) -> TokenSequence {
        let mut s = self.clone();
        let seg = self.segment_id.last().copied().unwrap_or(0);
        for _ in 0..k {
            s.push(Item::Special(Special::Pred), seg);
        }
        s
    }

    /// Targets with masked-out positions filled by class 0.
    pub fn targets_and_mask(&self) -> (Vec<usize>, Vec<u8>) {
        (self.vlm_target.iter().map(|t| t.unwrap_or(0)).collect(), self.vlm_mask.clone())
    }

    pub fn n_supervised(&self) -> usize {
        self.vlm_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.items.len();
        if self.vlm_target.len() != n || self.vlm_mask.len() != n || self.segment_id.len() != n {
            return Err(Error::Contract("sequence arrays differ in length".into()));
        }
        for p in 0..n {
            if self.vlm_mask[p] == 0 {
                continue;
            }
            if self.vlm_target[p].is_none() {
                return Err(Error::Contract(format!("position {p} is supervised without a target")));
            }
            let next_ok = matches!(self.items.get(p + 1), Some(Item::Text(_)) | Some(Item::Special(Special::Eos)));
            if !next_ok {
                return Err(Error::Contract(format!("position {p} is supervised but its successor is not text/EOS")));
            }
            if matches!(self.items[p], Item::Patch { .. }) {
                // a patch can precede text only as the last patch before EOI, which never happens
                return Err(Error::Contract(format!("patch position {p} carries a text target")));
            }
        }
        let first_pred = self.items.iter().position(|i| *i == Item::Special(Special::Pred));
        if let Some(fp) = first_pred {
            if self.items[fp..].iter().any(|i| *i != Item::Special(Special::Pred)) {
                return Err(Error::Contract("PRED tokens must form a contiguous suffix".into()));
            }
        }
        Ok(())
    }
}
