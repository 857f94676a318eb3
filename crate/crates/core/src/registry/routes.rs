use super::Strategy;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEntry {
    /// Upper-cased method or `"*"`.
    pub method: String,
    pub prefix: String,
    pub module_id: String,
    pub strategy: Strategy,
}

/// Immutable route snapshot, swapped whole on every registry change.
#[derive(Debug, Clone, Default)]
pub struct RouteTable {
    entries: Vec<RouteEntry>,
}

/// Whether `prefix` covers `path` on a segment boundary: `/api` matches
/// `/api`, `/api/x` and `/api?q`, not `/apix`.
pub fn prefix_matches(prefix: &str, path: &str) -> bool {
    let path = path.split('?').next().unwrap_or("");
    if prefix == "/" {
        return path.starts_with('/');
    }
    let prefix = prefix.trim_end_matches('/');
    match path.strip_prefix(prefix) {
        Some(rest) => rest.is_empty() || rest.starts_with('/'),
        None => false,
    }
}

impl RouteTable {
    pub fn new(entries: Vec<RouteEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[RouteEntry] {
        &self.entries
    }

    /// Longest matching prefix among rules whose method matches. At equal
    /// length an exact method rule beats the wildcard.
    pub fn resolve(&self, method: &str, path: &str) -> Option<&RouteEntry> {
        let method = method.to_ascii_uppercase();
        self.entries
            .iter()
            .filter(|e| e.method == "*" || e.method == method)
            .filter(|e| prefix_matches(&e.prefix, path))
            .max_by_key(|e| (e.prefix.trim_end_matches('/').len(), e.method != "*"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(method: &str, prefix: &str, m: &str) -> RouteEntry {
        RouteEntry {
            method: method.into(),
            prefix: prefix.into(),
            module_id: m.into(),
            strategy: Strategy::RoundRobin,
        }
    }

    fn to(t: &RouteTable, method: &str, path: &str) -> Option<String> {
        t.resolve(method, path).map(|e| e.module_id.clone())
    }

    #[test]
    fn longest_prefix_wins() {
        let t = RouteTable::new(vec![e("*", "/api", "A"), e("*", "/api/users", "B")]);
        assert_eq!(to(&t, "GET", "/api/users/7").as_deref(), Some("B"));
        assert_eq!(to(&t, "GET", "/api/other").as_deref(), Some("A"));
        assert_eq!(to(&t, "GET", "/nope"), None);
        assert_eq!(to(&t, "GET", "/apix"), None);
    }

    #[test]
    fn method_filter_then_wildcard_root() {
        let t = RouteTable::new(vec![e("POST", "/api", "A"), e("*", "/", "C")]);
        assert_eq!(to(&t, "GET", "/api").as_deref(), Some("C"));
        assert_eq!(to(&t, "post", "/api").as_deref(), Some("A"));
    }

    #[test]
    fn exact_method_beats_wildcard_at_equal_length() {
        let t = RouteTable::new(vec![e("*", "/x", "W"), e("GET", "/x", "G")]);
        assert_eq!(to(&t, "GET", "/x/1").as_deref(), Some("G"));
        assert_eq!(to(&t, "DELETE", "/x/1").as_deref(), Some("W"));
    }

    #[test]
    fn query_strings_are_ignored() {
        assert!(prefix_matches("/echo", "/echo?delay_ms=3"));
        assert!(prefix_matches("/", "/anything"));
        assert!(prefix_matches("/a/", "/a/b"));
    }
}
