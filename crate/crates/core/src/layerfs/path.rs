use super::FsError;

/// Normalizes an absolute path: collapses duplicate separators and strips a
/// trailing slash. `.` and `..` components are rejected.
pub fn normalize(path: &str) -> Result<String, FsError> {
    if !path.starts_with('/') {
        return Err(FsError::InvalidPath(path.to_string()));
    }
    let mut out = String::with_capacity(path.len());
    for comp in path.split('/').filter(|c| !c.is_empty()) {
        if comp == "." || comp == ".." {
            return Err(FsError::InvalidPath(path.to_string()));
        }
        out.push('/');
        out.push_str(comp);
    }
    if out.is_empty() {
        out.push('/');
    }
    Ok(out)
}

/// Proper ancestors of a normalized path, nearest first, excluding `/`.
pub fn ancestors(path: &str) -> impl Iterator<Item = &str> {
    let mut cur = path;
    std::iter::from_fn(move || {
        let idx = cur.rfind('/')?;
        if idx == 0 {
            return None;
        }
        cur = &cur[..idx];
        Some(cur)
    })
}

/// Prefix that every strict descendant of `dir` starts with.
pub fn child_prefix(dir: &str) -> String {
    if dir == "/" {
        "/".to_string()
    } else {
        format!("{dir}/")
    }
}

/// First path component of `path` below `dir`, if `path` is a strict descendant.
pub fn child_name<'a>(dir: &str, path: &'a str) -> Option<(&'a str, bool)> {
    let prefix = child_prefix(dir);
    let rest = path.strip_prefix(prefix.as_str())?;
    if rest.is_empty() {
        return None;
    }
    match rest.find('/') {
        Some(i) => Some((&rest[..i], true)),
        None => Some((rest, false)),
    }
}
