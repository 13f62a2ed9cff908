use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::morphology::TopoPath;

/// Map from topology path to embedding row. Rows are handed out in order of
/// first allocation and never change afterwards.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TopoRegistry {
    rows: BTreeMap<TopoPath, usize>,
    capacity: usize,
}

impl TopoRegistry {
    pub fn new(capacity: usize) -> Self {
        Self { rows: BTreeMap::new(), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn lookup(&self, path: &TopoPath) -> Option<usize> {
        self.rows.get(path).copied()
    }

    /// Row for `path`, allocating the next free row on first sight.
    pub fn allocate(&mut self, path: &TopoPath) -> Result<usize> {
        if let Some(r) = self.lookup(path) {
            return Ok(r);
        }
        let row = self.rows.len();
        if row >= self.capacity {
            return Err(Error::Capacity(format!(
                "topology registry is full ({} rows); cannot add path {path}",
                self.capacity
            )));
        }
        self.rows.insert(path.clone(), row);
        Ok(row)
    }

    /// Allocates every unseen path in iteration order; returns how many were new.
    pub fn allocate_all<'a>(&mut self, paths: impl IntoIterator<Item = &'a TopoPath>) -> Result<usize> {
        let before = self.len();
        for p in paths {
            self.allocate(p)?;
        }
        Ok(self.len() - before)
    }

    /// Entries sorted lexicographically by path.
    pub fn entries(&self) -> impl Iterator<Item = (&TopoPath, usize)> {
        self.rows.iter().map(|(p, &r)| (p, r))
    }

    /// Rebuilds a registry from `(path, row)` records, checking that rows
    /// are a permutation of `0..len`.
    pub fn from_records(records: Vec<(TopoPath, usize)>, capacity: usize) -> Result<Self> {
        let mut seen = vec![false; records.len()];
        let mut rows = BTreeMap::new();
        for (path, row) in records {
            if row >= seen.len() || seen[row] || row >= capacity {
                return Err(Error::Checkpoint(format!("registry row {row} for path {path} is invalid")));
            }
            seen[row] = true;
            if rows.insert(path.clone(), row).is_some() {
                return Err(Error::Checkpoint(format!("registry path {path} appears twice")));
            }
        }
        Ok(Self { rows, capacity })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_first_encounter() {
        let mut r = TopoRegistry::new(4);
        assert_eq!(r.allocate(&TopoPath(vec![2])).unwrap(), 0);
        assert_eq!(r.allocate(&TopoPath::root()).unwrap(), 1);
        assert_eq!(r.allocate(&TopoPath(vec![2])).unwrap(), 0);
        assert_eq!(r.lookup(&TopoPath(vec![1])), None);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut r = TopoRegistry::new(2);
        r.allocate(&TopoPath(vec![1])).unwrap();
        r.allocate(&TopoPath(vec![2])).unwrap();
        assert!(matches!(r.allocate(&TopoPath(vec![3])), Err(Error::Capacity(_))));
    }

    #[test]
    fn entries_are_sorted() {
        let mut r = TopoRegistry::new(8);
        for p in [vec![2], vec![1, 1], vec![], vec![1]] {
            r.allocate(&TopoPath(p)).unwrap();
        }
        let listed: Vec<String> = r.entries().map(|(p, _)| p.to_string()).collect();
        assert_eq!(listed, ["[]", "[1]", "[1,1]", "[2]"]);
    }

    #[test]
    fn records_round_trip() {
        let mut r = TopoRegistry::new(8);
        r.allocate_all(&[TopoPath(vec![3]), TopoPath(vec![1, 2])]).unwrap();
        let recs: Vec<_> = r.entries().map(|(p, i)| (p.clone(), i)).collect();
        assert_eq!(TopoRegistry::from_records(recs, 8).unwrap(), r);
        assert!(TopoRegistry::from_records(vec![(TopoPath::root(), 3)], 8).is_err());
    }
}
