//! Canonical record encoding.
//!
//! Every persisted or signed artifact in this crate serializes through the
//! same scheme so that equal values produce identical bytes and distinct
//! values never collide:
//!
//! ```text
//! RECORD := FIELD*
//! FIELD  := NAME_LEN(u32 BE) NAME(UTF-8) VALUE_LEN(u32 BE) VALUE(bytes)
//! ```
//!
//! Field names are unique and strictly ascending within a record. Integers
//! encode as 8-byte big-endian, booleans as integer 0/1, floats as IEEE-754
//! bit patterns (8-byte big-endian), enums as their lowercase token, maps as
//! a nested record, and lists as a concatenation of u32-length-prefixed
//! items. Optional fields are omitted entirely when absent; presence or
//! absence is therefore part of the encoded identity.
//!
//! Decoding rejects out-of-order fields, duplicate names, and trailing
//! bytes, which makes the encoding canonical in both directions: there is
//! exactly one byte string per value and exactly one value per byte string.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::Result;

/// Builds one record. Fields may be added in any order; `finish` emits them
/// sorted by name.
#[derive(Default)]
pub struct RecordBuilder {
    fields: BTreeMap<String, Vec<u8>>,
}

impl RecordBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raw(mut self, name: &str, value: impl Into<Vec<u8>>) -> Self {
        let prev = self.fields.insert(name.to_string(), value.into());
        debug_assert!(prev.is_none(), "duplicate field {name:?}");
        self
    }

    pub fn str(self, name: &str, value: &str) -> Self {
        self.raw(name, value.as_bytes().to_vec())
    }

    pub fn u64(self, name: &str, value: u64) -> Self {
        self.raw(name, value.to_be_bytes().to_vec())
    }

    pub fn bool(self, name: &str, value: bool) -> Self {
        self.u64(name, u64::from(value))
    }

    pub fn f64(self, name: &str, value: f64) -> Self {
        self.raw(name, value.to_bits().to_be_bytes().to_vec())
    }

    /// String-to-string map as a nested record.
    pub fn map(self, name: &str, value: &BTreeMap<String, String>) -> Self {
        let mut inner = RecordBuilder::new();
        for (k, v) in value {
            inner = inner.str(k, v);
        }
        self.raw(name, inner.finish())
    }

    /// List of pre-encoded items, each length-prefixed.
    pub fn list(self, name: &str, items: &[Vec<u8>]) -> Self {
        self.raw(name, encode_list(items))
    }

    pub fn opt_raw(self, name: &str, value: Option<impl Into<Vec<u8>>>) -> Self {
        match value {
            Some(v) => self.raw(name, v),
            None => self,
        }
    }

    pub fn opt_map(self, name: &str, value: Option<&BTreeMap<String, String>>) -> Self {
        match value {
            Some(v) => self.map(name, v),
            None => self,
        }
    }

    pub fn finish(self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, value) in &self.fields {
            out.extend_from_slice(&(name.len() as u32).to_be_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.len() as u32).to_be_bytes());
            out.extend_from_slice(value);
        }
        out
    }
}

pub fn encode_list(items: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        out.extend_from_slice(&(item.len() as u32).to_be_bytes());
        out.extend_from_slice(item);
    }
    out
}

pub fn decode_list(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut items = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(Error::MalformedEncoding("truncated list item length".into()));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(Error::MalformedEncoding("list item overruns buffer".into()));
        }
        items.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    Ok(items)
}

/// Parsed view of one record: field name to raw value bytes.
pub struct RecordView {
    fields: BTreeMap<String, Vec<u8>>,
}

impl RecordView {
    /// Parses a full buffer. The buffer must contain exactly one canonical
    /// record: strictly ascending unique field names, no trailing bytes.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut fields = BTreeMap::new();
        let mut rest = bytes;
        let mut prev_name: Option<String> = None;
        while !rest.is_empty() {
            let (name, value, tail) = take_field(rest)?;
            if let Some(prev) = &prev_name {
                if name.as_str() <= prev.as_str() {
                    return Err(Error::MalformedEncoding(format!(
                        "field {name:?} out of canonical order after {prev:?}"
                    )));
                }
            }
            prev_name = Some(name.clone());
            fields.insert(name, value);
            rest = tail;
        }
        Ok(Self { fields })
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    pub fn opt_raw(&self, name: &str) -> Option<&[u8]> {
        self.fields.get(name).map(Vec::as_slice)
    }

    pub fn raw(&self, name: &str) -> Result<&[u8]> {
        self.opt_raw(name)
            .ok_or_else(|| Error::MalformedEncoding(format!("missing field {name:?}")))
    }

    pub fn str(&self, name: &str) -> Result<String> {
        String::from_utf8(self.raw(name)?.to_vec())
            .map_err(|_| Error::MalformedEncoding(format!("field {name:?} is not UTF-8")))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let raw = self.raw(name)?;
        let arr: [u8; 8] = raw
            .try_into()
            .map_err(|_| Error::MalformedEncoding(format!("field {name:?} is not a u64")))?;
        Ok(u64::from_be_bytes(arr))
    }

    pub fn bool(&self, name: &str) -> Result<bool> {
        match self.u64(name)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::MalformedEncoding(format!(
                "field {name:?} has non-boolean value {other}"
            ))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        let raw = self.raw(name)?;
        let arr: [u8; 8] = raw
            .try_into()
            .map_err(|_| Error::MalformedEncoding(format!("field {name:?} is not an f64")))?;
        Ok(f64::from_bits(u64::from_be_bytes(arr)))
    }

    pub fn map(&self, name: &str) -> Result<BTreeMap<String, String>> {
        let inner = RecordView::parse(self.raw(name)?)?;
        let mut out = BTreeMap::new();
        for key in inner.fields.keys() {
            out.insert(key.clone(), inner.str(key)?);
        }
        Ok(out)
    }

    pub fn opt_map(&self, name: &str) -> Result<Option<BTreeMap<String, String>>> {
        match self.opt_raw(name) {
            Some(_) => Ok(Some(self.map(name)?)),
            None => Ok(None),
        }
    }

    pub fn list(&self, name: &str) -> Result<Vec<Vec<u8>>> {
        decode_list(self.raw(name)?)
    }
}

fn take_field(rest: &[u8]) -> Result<(String, Vec<u8>, &[u8])> {
    if rest.len() < 4 {
        return Err(Error::MalformedEncoding("truncated field name length".into()));
    }
    let name_len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < name_len {
        return Err(Error::MalformedEncoding("field name overruns buffer".into()));
    }
    let name = String::from_utf8(rest[..name_len].to_vec())
        .map_err(|_| Error::MalformedEncoding("field name is not UTF-8".into()))?;
    let rest = &rest[name_len..];
    if rest.len() < 4 {
        return Err(Error::MalformedEncoding("truncated value length".into()));
    }
    let value_len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < value_len {
        return Err(Error::MalformedEncoding("field value overruns buffer".into()));
    }
    Ok((name, rest[..value_len].to_vec(), &rest[value_len..]))
}

/// Hex armor for binary records embedded in textual files: lowercase hex,
/// one line, trailing newline.
pub fn armor(bytes: &[u8]) -> String {
    let mut s = hex::encode(bytes);
    s.push('\n');
    s
}

pub fn dearmor(text: &str) -> Result<Vec<u8>> {
    hex::decode(text.trim())
        .map_err(|e| Error::MalformedEncoding(format!("bad hex armor: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fields_sort_by_name_regardless_of_insertion_order() {
        let a = RecordBuilder::new().str("zeta", "1").str("alpha", "2").finish();
        let b = RecordBuilder::new().str("alpha", "2").str("zeta", "1").finish();
        assert_eq!(a, b);
        let view = RecordView::parse(&a).unwrap();
        assert_eq!(view.field_names().collect::<Vec<_>>(), ["alpha", "zeta"]);
    }

    #[test]
    fn round_trips_typed_values() {
        let mut map = BTreeMap::new();
        map.insert("role".to_string(), "driver".to_string());
        let bytes = RecordBuilder::new()
            .u64("serial", 42)
            .str("subject", "resident-7")
            .bool("active", true)
            .f64("threshold", 0.6)
            .map("attrs", &map)
            .list("items", &[vec![1, 2], vec![], vec![3]])
            .finish();
        let view = RecordView::parse(&bytes).unwrap();
        assert_eq!(view.u64("serial").unwrap(), 42);
        assert_eq!(view.str("subject").unwrap(), "resident-7");
        assert!(view.bool("active").unwrap());
        assert_eq!(view.f64("threshold").unwrap(), 0.6);
        assert_eq!(view.map("attrs").unwrap(), map);
        assert_eq!(view.list("items").unwrap(), vec![vec![1, 2], vec![], vec![3]]);
        assert!(view.opt_raw("absent").is_none());
    }

    #[test]
    fn rejects_trailing_and_truncated_bytes() {
        let bytes = RecordBuilder::new().u64("n", 1).finish();
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(RecordView::parse(&trailing).is_err());
        assert!(RecordView::parse(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_out_of_order_and_duplicate_fields() {
        // Hand-build "b" then "a": valid framing, non-canonical order.
        let mut raw = Vec::new();
        for name in ["b", "a"] {
            raw.extend_from_slice(&1u32.to_be_bytes());
            raw.extend_from_slice(name.as_bytes());
            raw.extend_from_slice(&1u32.to_be_bytes());
            raw.push(7);
        }
        assert!(RecordView::parse(&raw).is_err());

        let mut dup = Vec::new();
        for _ in 0..2 {
            dup.extend_from_slice(&1u32.to_be_bytes());
            dup.extend_from_slice(b"a");
            dup.extend_from_slice(&1u32.to_be_bytes());
            dup.push(7);
        }
        assert!(RecordView::parse(&dup).is_err());
    }

    #[test]
    fn absent_field_differs_from_empty_value() {
        let absent = RecordBuilder::new().u64("n", 1).finish();
        let empty = RecordBuilder::new().u64("n", 1).raw("tag", vec![]).finish();
        assert_ne!(absent, empty);
    }

    #[test]
    fn armor_round_trip() {
        let bytes = RecordBuilder::new().str("k", "v").finish();
        let armored = armor(&bytes);
        assert!(armored.ends_with('\n'));
        assert_eq!(dearmor(&armored).unwrap(), bytes);
    }

    fn field_strategy() -> impl Strategy<Value = (String, Vec<u8>)> {
        ("[a-z_]{1,12}", proptest::collection::vec(any::<u8>(), 0..40))
    }

    proptest! {
        // Injectivity: two records with different field maps never encode to
        // the same bytes, and every encoding parses back to its source.
        #[test]
        fn encoding_is_injective(
            a in proptest::collection::btree_map(field_strategy().prop_map(|f| f.0), proptest::collection::vec(any::<u8>(), 0..40), 0..6),
            b in proptest::collection::btree_map(field_strategy().prop_map(|f| f.0), proptest::collection::vec(any::<u8>(), 0..40), 0..6),
        ) {
            let enc = |m: &BTreeMap<String, Vec<u8>>| {
                let mut r = RecordBuilder::new();
                for (k, v) in m {
                    r = r.raw(k, v.clone());
                }
                r.finish()
            };
            let ea = enc(&a);
            let eb = enc(&b);
            prop_assert_eq!(a == b, ea == eb);
            let va = RecordView::parse(&ea).unwrap();
            prop_assert_eq!(va.fields, a);
        }

        // Any single-byte corruption either fails to parse or parses to a
        // different field map; it never aliases silently into the original.
        #[test]
        fn corruption_never_aliases(
            m in proptest::collection::btree_map("[a-z]{1,8}", proptest::collection::vec(any::<u8>(), 1..20), 1..4),
            pos_seed in any::<usize>(),
            delta in 1u8..=255,
        ) {
            let mut r = RecordBuilder::new();
            for (k, v) in &m {
                r = r.raw(k, v.clone());
            }
            let bytes = r.finish();
            let mut corrupt = bytes.clone();
            let pos = pos_seed % corrupt.len();
            corrupt[pos] ^= delta;
            if let Ok(view) = RecordView::parse(&corrupt) {
                let reparsed: BTreeMap<String, Vec<u8>> =
                    view.field_names().map(|n| (n.to_string(), view.raw(n).unwrap().to_vec())).collect();
                prop_assert_ne!(reparsed, m);
            }
        }
    }
}
