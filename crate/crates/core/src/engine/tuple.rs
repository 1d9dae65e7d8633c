//! Wire formats.
//!
//! A tuple is `klen: u32 LE, key, vlen: u32 LE, value`. Persisted
//! partitions and broadcast values are plain tuple sequences. Internally,
//! stored partitions prefix every tuple with its `u64 LE` source record
//! index, and shuffle buckets additionally carry a `u32 LE` emission
//! sequence number after the index.

use bytes::{BufMut, Bytes, BytesMut};
use xxhash_rust::xxh64::xxh64;

use crate::error::{Error, Result};

/// Seed of the shuffle hash (the ASCII bytes of "PILOTKIT").
pub const SHUFFLE_SEED: u64 = 0x5049_4C4F_544B_4954;

/// XXH64 of the key with [`SHUFFLE_SEED`].
pub fn shuffle_hash(key: &[u8]) -> u64 {
    xxh64(key, SHUFFLE_SEED)
}

/// Reducer receiving `key` out of `reducers`.
pub fn reducer_for(key: &[u8], reducers: usize) -> usize {
    (shuffle_hash(key) % reducers as u64) as usize
}

pub fn put_tuple(buf: &mut BytesMut, key: &[u8], value: &[u8]) {
    put_framed(buf, &[], key, value);
}

/// `head` followed by the tuple, staged on the stack when small so the
/// buffer is extended once.
fn put_framed(buf: &mut BytesMut, head: &[u8], key: &[u8], value: &[u8]) {
    let klen = (key.len() as u32).to_le_bytes();
    let vlen = (value.len() as u32).to_le_bytes();
    let parts = [head, &klen, key, &vlen, value];
    let n = head.len() + 8 + key.len() + value.len();
    let mut tmp = [0u8; 192];
    if n <= tmp.len() {
        let mut at = 0;
        for part in parts {
            tmp[at..at + part.len()].copy_from_slice(part);
            at += part.len();
        }
        buf.extend_from_slice(&tmp[..n]);
    } else {
        buf.reserve(n);
        for part in parts {
            buf.put_slice(part);
        }
    }
}

pub fn encode_tuples<K: AsRef<[u8]>, V: AsRef<[u8]>>(tuples: impl IntoIterator<Item = (K, V)>) -> Bytes {
    let mut buf = BytesMut::new();
    for (k, v) in tuples {
        put_tuple(&mut buf, k.as_ref(), v.as_ref());
    }
    buf.freeze()
}

/// Split a tuple sequence into zero-copy `(key, value)` slices.
pub fn decode_tuples(bytes: &Bytes) -> Result<Vec<(Bytes, Bytes)>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (k, v, next) = read_tuple(bytes, pos)?;
        out.push((bytes.slice(k.0..k.0 + k.1), bytes.slice(v.0..v.0 + v.1)));
        pos = next;
    }
    Ok(out)
}

type Span = (usize, usize);

fn read_u32(buf: &[u8], pos: usize) -> Result<u32> {
    buf.get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Encoding(format!("truncated length at byte {pos}")))
}

fn read_u64(buf: &[u8], pos: usize) -> Result<u64> {
    buf.get(pos..pos + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::Encoding(format!("truncated index at byte {pos}")))
}

fn read_tuple(buf: &[u8], pos: usize) -> Result<(Span, Span, usize)> {
    let klen = read_u32(buf, pos)? as usize;
    let k = pos + 4;
    let vpos = k + klen;
    let vlen = read_u32(buf, vpos)? as usize;
    let v = vpos + 4;
    let end = v + vlen;
    if end > buf.len() {
        return Err(Error::Encoding(format!("tuple at byte {pos} runs past the end")));
    }
    Ok(((k, klen), (v, vlen), end))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `index, tuple`
    Partition,
    /// `index, seq, tuple`
    Bucket,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Rec {
    pub(crate) index: u64,
    pub(crate) seq: u32,
    key: (u32, u32),
    value: (u32, u32),
}

/// Decoded view over a stored partition or bucket; keys and values are
/// slices of the shared buffer.
#[derive(Debug)]
pub struct Records {
    buf: Bytes,
    pub(crate) recs: Vec<Rec>,
}

impl Records {
    pub(crate) fn decode(buf: Bytes, layout: Layout) -> Result<Records> {
        if buf.len() > u32::MAX as usize {
            return Err(Error::Encoding("item larger than 4 GiB".into()));
        }
        let mut recs = Vec::new();
        let mut pos = 0;
        while pos < buf.len() {
            let index = read_u64(&buf, pos)?;
            pos += 8;
            let seq = if layout == Layout::Bucket {
                let s = read_u32(&buf, pos)?;
                pos += 4;
                s
            } else {
                0
            };
            let (k, v, next) = read_tuple(&buf, pos)?;
            recs.push(Rec {
                index,
                seq,
                key: (k.0 as u32, k.1 as u32),
                value: (v.0 as u32, v.1 as u32),
            });
            pos = next;
        }
        Ok(Records { buf, recs })
    }

    pub fn len(&self) -> usize {
        self.recs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recs.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.buf.len()
    }

    pub fn key(&self, i: usize) -> &[u8] {
        self.key_of(&self.recs[i])
    }

    pub fn value(&self, i: usize) -> &[u8] {
        self.value_of(&self.recs[i])
    }

    /// Source record index of record `i`.
    pub fn index(&self, i: usize) -> u64 {
        self.recs[i].index
    }

    pub(crate) fn key_of(&self, r: &Rec) -> &[u8] {
        &self.buf[r.key.0 as usize..(r.key.0 + r.key.1) as usize]
    }

    pub(crate) fn value_of(&self, r: &Rec) -> &[u8] {
        &self.buf[r.value.0 as usize..(r.value.0 + r.value.1) as usize]
    }

    pub fn tuples(&self) -> impl Iterator<Item = (&[u8], &[u8])> + '_ {
        self.recs.iter().map(|r| (self.key_of(r), self.value_of(r)))
    }

    /// Re-encode as a plain tuple sequence.
    pub fn to_tuple_bytes(&self) -> Bytes {
        encode_tuples(self.tuples())
    }
}

/// Builder for stored partitions.
#[derive(Default)]
pub(crate) struct PartitionWriter {
    pub(crate) buf: BytesMut,
    pub(crate) count: u64,
}

impl PartitionWriter {
    pub(crate) fn push(&mut self, index: u64, key: &[u8], value: &[u8]) {
        put_framed(&mut self.buf, &index.to_le_bytes(), key, value);
        self.count += 1;
    }
}

pub(crate) fn put_bucket_record(buf: &mut BytesMut, index: u64, seq: u32, key: &[u8], value: &[u8]) {
    let mut head = [0u8; 12];
    head[..8].copy_from_slice(&index.to_le_bytes());
    head[8..].copy_from_slice(&seq.to_le_bytes());
    put_framed(buf, &head, key, value);
}
