//! Binary frames exchanged between sender and receiver.
//!
//! Layout (all integers and doubles little-endian):
//!
//! ```text
//! offset  size  field
//! 0       1     kind (0x01 state update, 0x02 model update)
//! 1       4     n    (u32)
//! 5       4     q    (u32, zero for state updates)
//! 9       8     step index (state update) or model version (model update)
//! 17      ...   payload doubles
//! ```
//!
//! A state update carries `n` doubles. A model update carries `A_cl` (n*n),
//! `B` (n*q) and `Sigma` (n*n), each row-major.

use nalgebra::DMatrix;

pub const KIND_STATE: u8 = 0x01;
pub const KIND_MODEL: u8 = 0x02;
pub const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("truncated frame: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unknown frame kind 0x{0:02X}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    StateUpdate {
        step: u64,
        state: Vec<f64>,
    },
    ModelUpdate {
        version: u64,
        a_cl: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
    },
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::StateUpdate { .. } => KIND_STATE,
            Message::ModelUpdate { .. } => KIND_MODEL,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Message::StateUpdate { state, .. } => HEADER_LEN + 8 * state.len(),
            Message::ModelUpdate { a_cl, b, sigma, .. } => {
                HEADER_LEN + 8 * (a_cl.len() + b.len() + sigma.len())
            }
        }
    }
}

fn put_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

/// Panics if the model matrices are not `n x n`, `n x q`, `n x n`.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.push(msg.kind());
    match msg {
        Message::StateUpdate { step, state } => {
            out.extend_from_slice(&(state.len() as u32).to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&step.to_le_bytes());
            for v in state {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::ModelUpdate {
            version,
            a_cl,
            b,
            sigma,
        } => {
            let n = a_cl.nrows();
            assert!(
                a_cl.ncols() == n && b.nrows() == n && sigma.shape() == (n, n),
                "inconsistent model matrix shapes"
            );
            out.extend_from_slice(&(n as u32).to_le_bytes());
            out.extend_from_slice(&(b.ncols() as u32).to_le_bytes());
            out.extend_from_slice(&version.to_le_bytes());
            put_row_major(&mut out, a_cl);
            put_row_major(&mut out, b);
            put_row_major(&mut out, sigma);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        b
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64();
            }
        }
        m
    }
}

pub fn decode_message(buf: &[u8]) -> Result<Message, WireError> {
    if buf.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            expected: HEADER_LEN,
            actual: buf.len(),
        });
    }
    let kind = buf[0];
    if kind != KIND_STATE && kind != KIND_MODEL {
        return Err(WireError::UnknownKind(kind));
    }
    let mut r = Reader { buf, pos: 1 };
    let n = u32::from_le_bytes(r.take()) as usize;
    let q = u32::from_le_bytes(r.take()) as usize;
    let tag = u64::from_le_bytes(r.take());

    let doubles = match kind {
        KIND_STATE => {
            if q != 0 {
                return Err(WireError::InvalidHeader(format!(
                    "state update must have q = 0, got {q}"
                )));
            }
            Some(n)
        }
        _ => n
            .checked_mul(n)
            .and_then(|nn| nn.checked_mul(2))
            .and_then(|x| n.checked_mul(q).and_then(|nq| x.checked_add(nq))),
    };
    let expected = doubles
        .and_then(|d| d.checked_mul(8))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| WireError::InvalidHeader(format!("dimensions n = {n}, q = {q} overflow")))?;
    if buf.len() < expected {
        return Err(WireError::Truncated {
            expected,
            actual: buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(WireError::TrailingBytes(buf.len() - expected));
    }

    Ok(match kind {
        KIND_STATE => Message::StateUpdate {
            step: tag,
            state: (0..n).map(|_| r.f64()).collect(),
        },
        _ => {
            let a_cl = r.matrix(n, n);
            let b = r.matrix(n, q);
            let sigma = r.matrix(n, n);
            Message::ModelUpdate {
                version: tag,
                a_cl,
                b,
                sigma,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_state_update_is_25_bytes() {
        let frame = encode_message(&Message::StateUpdate {
            step: 42,
            state: vec![0.5],
        });
        assert_eq!(frame.len(), 25);
        assert_eq!(frame[0], KIND_STATE);
        assert_eq!(&frame[1..5], &1u32.to_le_bytes());
        assert_eq!(&frame[5..9], &0u32.to_le_bytes());
        assert_eq!(&frame[9..17], &42u64.to_le_bytes());
        assert_eq!(&frame[17..25], &0.5f64.to_le_bytes());
    }

    #[test]
    fn model_update_layout_is_row_major() {
        let msg = Message::ModelUpdate {
            version: 3,
            a_cl: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            b: DMatrix::from_row_slice(2, 1, &[5.0, 6.0]),
            sigma: DMatrix::from_row_slice(2, 2, &[7.0, 8.0, 8.0, 9.0]),
        };
        let frame = encode_message(&msg);
        assert_eq!(frame.len(), HEADER_LEN + 8 * 10);
        assert_eq!(frame.len(), msg.encoded_len());
        let second = f64::from_le_bytes(frame[25..33].try_into().unwrap());
        assert_eq!(second, 2.0);
        assert_eq!(decode_message(&frame).unwrap(), msg);
    }

    #[test]
    fn rejects_unknown_kind_and_truncation() {
        let mut frame = encode_message(&Message::StateUpdate {
            step: 1,
            state: vec![1.0, 2.0],
        });
        let mut bad = frame.clone();
        bad[0] = 0xFF;
        assert_eq!(decode_message(&bad), Err(WireError::UnknownKind(0xFF)));
        assert!(matches!(
            decode_message(&frame[..frame.len() - 1]),
            Err(WireError::Truncated { .. })
        ));
        assert!(matches!(
            decode_message(&frame[..5]),
            Err(WireError::Truncated { .. })
        ));
        frame.push(0);
        assert_eq!(decode_message(&frame), Err(WireError::TrailingBytes(1)));
    }

    #[test]
    fn absurd_dimensions_do_not_allocate() {
        let mut frame = vec![KIND_MODEL];
        frame.extend_from_slice(&u32::MAX.to_le_bytes());
        frame.extend_from_slice(&u32::MAX.to_le_bytes());
        frame.extend_from_slice(&0u64.to_le_bytes());
        assert!(decode_message(&frame).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(any::<f64>().prop_filter("nan", |v| !v.is_nan()), rows * cols)
            .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
    }

    fn message() -> impl Strategy<Value = Message> {
        let state = (any::<u64>(), proptest::collection::vec(-1e6..1e6f64, 0..8))
            .prop_map(|(step, state)| Message::StateUpdate { step, state });
        let model = (1usize..5, 1usize..3, any::<u64>()).prop_flat_map(|(n, q, version)| {
            (matrix(n, n), matrix(n, q), matrix(n, n)).prop_map(move |(a_cl, b, sigma)| {
                Message::ModelUpdate {
                    version,
                    a_cl,
                    b,
                    sigma,
                }
            })
        });
        prop_oneof![state, model]
    }

    proptest! {
        #[test]
        fn round_trip(msg in message()) {
            let frame = encode_message(&msg);
            prop_assert_eq!(frame.len(), msg.encoded_len());
            prop_assert_eq!(decode_message(&frame).unwrap(), msg);
        }
    }
}
