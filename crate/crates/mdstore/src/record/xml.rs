//! Minimal XML reader for record descriptor files.
//!
//! Descriptor files in the field use bare attribute values (`array_len=33`),
//! which strict XML parsers reject, so this reader accepts both quoted and
//! bare values. It understands exactly what descriptors need: one root
//! element, nested elements, attributes, comments, and the XML declaration.
//! Text content is ignored. Parsing is iterative; malformed input cannot
//! overflow the stack.

pub struct Element {
    pub name: String,
    pub attrs: Vec<(String, String)>,
    pub children: Vec<Element>,
}

impl Element {
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug)]
pub struct XmlError {
    pub pos: usize,
    pub msg: String,
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, XmlError> {
        Err(XmlError {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        Some(b)
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
            self.pos += 1;
        }
    }

    fn skip_until(&mut self, pat: &[u8]) -> bool {
        while self.pos < self.bytes.len() {
            if self.bytes[self.pos..].starts_with(pat) {
                self.pos += pat.len();
                return true;
            }
            self.pos += 1;
        }
        false
    }

    fn name(&mut self) -> Result<String, XmlError> {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b':' | b'.') {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return self.err("expected a name");
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn attr_value(&mut self) -> Result<String, XmlError> {
        match self.peek() {
            Some(q @ (b'"' | b'\'')) => {
                self.pos += 1;
                let start = self.pos;
                while let Some(b) = self.peek() {
                    if b == q {
                        let raw = &self.bytes[start..self.pos];
                        self.pos += 1;
                        return Ok(decode_entities(raw));
                    }
                    self.pos += 1;
                }
                self.err("unterminated attribute value")
            }
            _ => {
                // Bare value: runs to whitespace, '/' or '>'.
                let start = self.pos;
                while let Some(b) = self.peek() {
                    if matches!(b, b' ' | b'\t' | b'\r' | b'\n' | b'/' | b'>') {
                        break;
                    }
                    self.pos += 1;
                }
                if self.pos == start {
                    return self.err("empty attribute value");
                }
                Ok(decode_entities(&self.bytes[start..self.pos]))
            }
        }
    }
}

fn decode_entities(raw: &[u8]) -> String {
    let s = String::from_utf8_lossy(raw);
    if !s.contains('&') {
        return s.into_owned();
    }
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

/// Parse a document and return its root element.
pub fn parse(text: &str) -> Result<Element, XmlError> {
    let mut sc = Scanner {
        bytes: text.as_bytes(),
        pos: 0,
    };
    // Stack of open elements; the sentinel at index 0 collects the root.
    let mut stack: Vec<Element> = vec![Element {
        name: String::new(),
        attrs: Vec::new(),
        children: Vec::new(),
    }];

    loop {
        // Skip text content between tags.
        while let Some(b) = sc.peek() {
            if b == b'<' {
                break;
            }
            sc.pos += 1;
        }
        if sc.peek().is_none() {
            break;
        }
        sc.bump(); // '<'
        match sc.peek() {
            Some(b'?') => {
                if !sc.skip_until(b"?>") {
                    return sc.err("unterminated declaration");
                }
            }
            Some(b'!') => {
                sc.bump();
                if sc.bytes[sc.pos..].starts_with(b"--") {
                    sc.pos += 2;
                    if !sc.skip_until(b"-->") {
                        return sc.err("unterminated comment");
                    }
                } else if !sc.skip_until(b">") {
                    return sc.err("unterminated markup declaration");
                }
            }
            Some(b'/') => {
                sc.bump();
                let name = sc.name()?;
                sc.skip_ws();
                if !sc.eat(b'>') {
                    return sc.err("expected '>' after closing tag");
                }
                if stack.len() < 2 {
                    return sc.err(format!("closing tag </{name}> with no open element"));
                }
                let done = stack.pop().unwrap();
                if done.name != name {
                    return sc.err(format!("mismatched closing tag </{name}> for <{}>", done.name));
                }
                stack.last_mut().unwrap().children.push(done);
            }
            Some(_) => {
                let name = sc.name()?;
                let mut elem = Element {
                    name,
                    attrs: Vec::new(),
                    children: Vec::new(),
                };
                loop {
                    sc.skip_ws();
                    match sc.peek() {
                        Some(b'>') => {
                            sc.bump();
                            stack.push(elem);
                            break;
                        }
                        Some(b'/') => {
                            sc.bump();
                            if !sc.eat(b'>') {
                                return sc.err("expected '>' after '/'");
                            }
                            stack.last_mut().unwrap().children.push(elem);
                            break;
                        }
                        Some(_) => {
                            let key = sc.name()?;
                            sc.skip_ws();
                            if !sc.eat(b'=') {
                                return sc.err(format!("expected '=' after attribute `{key}`"));
                            }
                            sc.skip_ws();
                            let value = sc.attr_value()?;
                            elem.attrs.push((key, value));
                        }
                        None => return sc.err("unterminated start tag"),
                    }
                }
            }
            None => return sc.err("dangling '<' at end of input"),
        }
    }

    if stack.len() != 1 {
        return sc.err(format!("unclosed element <{}>", stack.last().unwrap().name));
    }
    let sentinel = stack.pop().unwrap();
    let mut roots = sentinel.children;
    match roots.len() {
        0 => sc.err("no root element"),
        1 => Ok(roots.pop().unwrap()),
        _ => sc.err("multiple root elements"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_and_quoted_attrs() {
        let root = parse(r#"<a x=33 y="q v" z='7'><b/></a>"#).unwrap();
        assert_eq!(root.name, "a");
        assert_eq!(root.attr("x"), Some("33"));
        assert_eq!(root.attr("y"), Some("q v"));
        assert_eq!(root.attr("z"), Some("7"));
        assert_eq!(root.children.len(), 1);
    }

    #[test]
    fn comments_and_decl_skipped() {
        let root = parse("<?xml version=\"1.0\"?><!-- hi --><a><!-- x --><b/></a>").unwrap();
        assert_eq!(root.children.len(), 1);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse("<a><b></a></b>").is_err());
        assert!(parse("<a>").is_err());
        assert!(parse("</a>").is_err());
        assert!(parse("<a/><b/>").is_err());
        assert!(parse("").is_err());
        assert!(parse("<a x=/>").is_err());
        assert!(parse("<a x>").is_err());
    }

    #[test]
    fn deep_nesting_is_iterative() {
        let mut doc = String::new();
        for _ in 0..200_000 {
            doc.push_str("<a>");
        }
        // Unclosed: must error, not overflow.
        assert!(parse(&doc).is_err());
    }

    #[test]
    fn entities_in_attrs() {
        let root = parse(r#"<a x="&lt;&amp;&gt;"/>"#).unwrap();
        assert_eq!(root.attr("x"), Some("<&>"));
    }
}
