//! Axis roles for tagged tensors. Every tensor axis carries a role, and ops
//! align operands by role rather than by position.

/// Semantic role of one tensor axis.
///
/// Roles are unique within a tensor. `Query(code)` marks the query-side
/// duplicate of another role so attention can correlate every query position
/// with every key position; `code` is the [`AxisRole::code`] of the base role.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum AxisRole {
    /// Separated-source index, extent M.
    Source,
    /// Spatial grid position, extent G.
    Space,
    /// Frame index, extent T.
    Time,
    /// Embedding depth, extent D.
    Depth,
    /// Packed audio+video rows, extent M+G.
    Joint,
    /// Attention-head index when heads are batched.
    Head,
    /// Independent examples.
    Batch,
    /// Anonymous axis for generic tensors; the payload keeps several distinct.
    Generic(u8),
    /// Query-side duplicate of the role whose `code()` is the payload.
    Query(u8),
}

impl AxisRole {
    /// Stable numeric code, used as the payload of `Query`.
    pub fn code(self) -> u8 {
        match self {
            AxisRole::Source => 0,
            AxisRole::Space => 1,
            AxisRole::Time => 2,
            AxisRole::Depth => 3,
            AxisRole::Joint => 4,
            AxisRole::Head => 5,
            AxisRole::Batch => 6,
            AxisRole::Generic(i) => 16 + i,
            AxisRole::Query(c) => 128 + c,
        }
    }

    /// The query-side duplicate of this role. Nested queries are rejected by
    /// construction: attention relabels base roles only.
    pub fn as_query(self) -> AxisRole {
        debug_assert!(!matches!(self, AxisRole::Query(_)), "query of a query axis");
        AxisRole::Query(self.code())
    }

    /// Inverse of [`AxisRole::as_query`]; identity for non-query roles.
    pub fn base(self) -> AxisRole {
        match self {
            AxisRole::Query(c) => match c {
                0 => AxisRole::Source,
                1 => AxisRole::Space,
                2 => AxisRole::Time,
                3 => AxisRole::Depth,
                4 => AxisRole::Joint,
                5 => AxisRole::Head,
                6 => AxisRole::Batch,
                c if c >= 16 => AxisRole::Generic(c - 16),
                _ => AxisRole::Query(c),
            },
            other => other,
        }
    }

    pub fn is_query(self) -> bool {
        matches!(self, AxisRole::Query(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_roundtrip_covers_base_roles() {
        let roles = [
            AxisRole::Source,
            AxisRole::Space,
            AxisRole::Time,
            AxisRole::Depth,
            AxisRole::Joint,
            AxisRole::Head,
            AxisRole::Batch,
            AxisRole::Generic(0),
            AxisRole::Generic(7),
        ];
        for r in roles {
            assert_eq!(r.as_query().base(), r, "roundtrip failed for {r:?}");
            assert!(r.as_query().is_query());
        }
    }

    #[test]
    fn codes_are_distinct() {
        let roles = [
            AxisRole::Source,
            AxisRole::Space,
            AxisRole::Time,
            AxisRole::Depth,
            AxisRole::Joint,
            AxisRole::Head,
            AxisRole::Batch,
            AxisRole::Generic(0),
            AxisRole::Generic(1),
        ];
        for (i, a) in roles.iter().enumerate() {
            for b in roles.iter().skip(i + 1) {
                assert_ne!(a.code(), b.code(), "{a:?} vs {b:?}");
            }
        }
    }
}
