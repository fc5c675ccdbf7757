use serde::{Deserialize, Serialize};

use super::{AlignmentBand, RnntError, RnntInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub a: Vec<i64>,
    pub b_l: usize,
    pub b_r: usize,
}

/// Loss case file: `{T, U, V, logits[T][U+1][V], targets, band?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCase {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "U")]
    pub target_len: usize,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub logits: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<BandSpec>,
}

impl LossCase {
    pub fn instance(&self) -> Result<RnntInstance, RnntError> {
        if self.targets.len() != self.target_len {
            return Err(RnntError::Shape(format!("U={} but {} targets", self.target_len, self.targets.len())));
        }
        if self.logits.len() != self.frames {
            return Err(RnntError::Shape(format!("T={} but logits has {} frames", self.frames, self.logits.len())));
        }
        let mut flat = Vec::with_capacity(self.frames * (self.target_len + 1) * self.vocab);
        for (t, frame) in self.logits.iter().enumerate() {
            if frame.len() != self.target_len + 1 {
                return Err(RnntError::Shape(format!("logits[{t}] has {} rows, expected U+1={}", frame.len(), self.target_len + 1)));
            }
            for (u, node) in frame.iter().enumerate() {
                if node.len() != self.vocab {
                    return Err(RnntError::Shape(format!("logits[{t}][{u}] has {} entries, expected V={}", node.len(), self.vocab)));
                }
                flat.extend_from_slice(node);
            }
        }
        RnntInstance::new(self.frames, self.vocab, self.targets.clone(), flat)
    }

    pub fn band(&self) -> Result<Option<AlignmentBand>, RnntError> {
        self.band.as_ref().map(|b| AlignmentBand::new(b.a.clone(), b.b_l, b.b_r)).transpose()
    }

    pub fn from_instance(inst: &RnntInstance, band: Option<&AlignmentBand>) -> Self {
        let (t, u1, v) = (inst.frames(), inst.target_len() + 1, inst.vocab());
        let logits = (0..t)
            .map(|ti| (0..u1).map(|ui| inst.logits()[inst.index(ti, ui, 0)..inst.index(ti, ui, 0) + v].to_vec()).collect())
            .collect();
        Self {
            frames: t,
            target_len: u1 - 1,
            vocab: v,
            logits,
            targets: inst.targets().to_vec(),
            band: band.map(|b| BandSpec { a: b.token_frames().to_vec(), b_l: b.left(), b_r: b.right() }),
        }
    }
}

/// CLI result for one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossOutput {
    pub loss: f64,
    pub valid_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_max_abs: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_case_file() {
        let json = r#"{"T":1,"U":1,"V":2,"logits":[[[0,0],[0,0]]],"targets":[1],"band":{"a":[0],"b_l":15,"b_r":15}}"#;
        let case: LossCase = serde_json::from_str(json).unwrap();
        let inst = case.instance().unwrap();
        assert_eq!((inst.frames(), inst.target_len(), inst.vocab()), (1, 1, 2));
        assert_eq!(case.band().unwrap().unwrap().token_frames(), &[0]);
        assert_eq!(LossCase::from_instance(&inst, case.band().unwrap().as_ref()), case);
    }

    #[test]
    fn ragged_logits_rejected() {
        let json = r#"{"T":1,"U":1,"V":2,"logits":[[[0,0],[0]]],"targets":[1]}"#;
        let case: LossCase = serde_json::from_str(json).unwrap();
        assert!(matches!(case.instance(), Err(RnntError::Shape(_))));
        let json = r#"{"T":2,"U":0,"V":2,"logits":[[[0,0]]],"targets":[]}"#;
        let case: LossCase = serde_json::from_str(json).unwrap();
        assert!(matches!(case.instance(), Err(RnntError::Shape(_))));
    }
}
