//! The minimal SQL grammar: positional recursive descent over a tiny
//! lexer, plus a printer whose output parses back to the same statement.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::ledger::{AccountId, ColumnDef, ColumnType, Literal, Perm, PermSet, Predicate, SqlOperation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Statement {
    Op(SqlOperation),
    Select { table: String, filter: Vec<Predicate> },
}

impl Statement {
    pub fn into_operation(self) -> Option<SqlOperation> {
        match self {
            Statement::Op(op) => Some(op),
            Statement::Select { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SqlErrorKind {
    Syntax(String),
    Unsupported(String),
    Invalid(String),
}

/// Parse failure with a 1-based character position into the input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct SqlError {
    pub position: usize,
    pub kind: SqlErrorKind,
}

impl fmt::Display for SqlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            SqlErrorKind::Syntax(m) => write!(f, "syntax error at position {}: {m}", self.position),
            SqlErrorKind::Unsupported(c) => write!(f, "unsupported construct at position {}: {c}", self.position),
            SqlErrorKind::Invalid(m) => write!(f, "invalid statement at position {}: {m}", self.position),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Num(String),
    Str(String),
    Punct(char),
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("{w:?}"),
            Tok::Num(v) => v.clone(),
            Tok::Str(_) => "a text literal".into(),
            Tok::Punct(c) => format!("'{c}'"),
            Tok::End => "end of input".into(),
        }
    }
}

fn syntax(position: usize, msg: impl Into<String>) -> SqlError {
    SqlError { position, kind: SqlErrorKind::Syntax(msg.into()) }
}

fn unsupported(position: usize, what: impl Into<String>) -> SqlError {
    SqlError { position, kind: SqlErrorKind::Unsupported(what.into()) }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, SqlError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((pos, Tok::Word(chars[start..i].iter().collect())));
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            // Hex account ids may start with a digit.
            if c != '-' && chars.get(i).is_some_and(|d| d.is_ascii_alphabetic() || *d == '_') {
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push((pos, Tok::Word(chars[start..i].iter().collect())));
            } else {
                out.push((pos, Tok::Num(chars[start..i].iter().collect())));
            }
        } else if c == '\'' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(syntax(pos, "unterminated text literal")),
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                        s.push('\'');
                        i += 2;
                    }
                    Some('\'') => {
                        i += 1;
                        break;
                    }
                    Some(ch) => {
                        s.push(*ch);
                        i += 1;
                    }
                }
            }
            out.push((pos, Tok::Str(s)));
        } else {
            out.push((pos, Tok::Punct(c)));
            i += 1;
        }
    }
    out.push((chars.len() + 1, Tok::End));
    Ok(out)
}

/// Known words that name constructs outside the grammar.
fn unsupported_word(w: &str) -> Option<&'static str> {
    Some(match w.to_ascii_uppercase().as_str() {
        "OR" => "OR predicates",
        "NOT" => "NOT predicates",
        "ORDER" => "ORDER BY",
        "GROUP" => "GROUP BY",
        "HAVING" => "HAVING",
        "LIMIT" => "LIMIT",
        "OFFSET" => "OFFSET",
        "JOIN" | "INNER" | "LEFT" | "RIGHT" | "CROSS" | "NATURAL" => "joins",
        "LIKE" => "LIKE",
        "IN" => "IN lists",
        "IS" => "IS comparisons",
        "BETWEEN" => "BETWEEN",
        "NULL" => "NULL",
        "RETURNING" => "RETURNING",
        _ => return None,
    })
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn unexpected(&self, expected: &str) -> SqlError {
        if let Tok::Word(w) = self.peek() {
            if let Some(c) = unsupported_word(w) {
                return unsupported(self.pos(), c);
            }
        }
        if let Tok::Punct(c @ ('<' | '>' | '!')) = self.peek() {
            return unsupported(self.pos(), format!("comparison operator '{c}'"));
        }
        syntax(self.pos(), format!("expected {expected}, found {}", self.peek().describe()))
    }

    fn kw(&mut self, kw: &str) -> Result<(), SqlError> {
        if self.is_kw(kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(kw))
        }
    }

    fn punct(&mut self, c: char) -> Result<(), SqlError> {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&format!("'{c}'")))
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn name(&mut self, what: &str) -> Result<String, SqlError> {
        match self.peek().clone() {
            Tok::Word(w) => {
                self.bump();
                if *self.peek() == Tok::Punct('.') {
                    return Err(unsupported(self.pos(), "qualified names"));
                }
                Ok(w)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn literal(&mut self) -> Result<Literal, SqlError> {
        match self.peek().clone() {
            Tok::Num(s) => {
                let v = s.parse::<i64>().map_err(|_| syntax(self.pos(), format!("integer literal {s} out of range")))?;
                self.bump();
                Ok(Literal::Int(v))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Literal::Text(s))
            }
            Tok::Word(w) if w.eq_ignore_ascii_case("NULL") => Err(unsupported(self.pos(), "NULL")),
            Tok::Word(_) => Err(unsupported(self.pos(), "expressions (only literals are allowed)")),
            _ => Err(self.unexpected("a literal")),
        }
    }

    /// `c = v`, rejecting other comparison forms by name.
    fn equality(&mut self) -> Result<(String, Literal), SqlError> {
        let col = self.name("a column name")?;
        if let Tok::Word(w) = self.peek() {
            if let Some(c) = unsupported_word(w) {
                return Err(unsupported(self.pos(), c));
            }
        }
        self.punct('=')?;
        let v = self.literal()?;
        if let Tok::Punct(c @ ('+' | '-' | '*' | '/' | '|')) = self.peek() {
            return Err(unsupported(self.pos(), format!("arithmetic operator '{c}'")));
        }
        Ok((col, v))
    }

    fn opt_where(&mut self) -> Result<Vec<Predicate>, SqlError> {
        if !self.is_kw("WHERE") {
            return Ok(Vec::new());
        }
        self.bump();
        let mut out = Vec::new();
        loop {
            let (column, value) = self.equality()?;
            out.push(Predicate { column, value });
            if self.is_kw("AND") {
                self.bump();
            } else {
                return Ok(out);
            }
        }
    }

    fn finish(&mut self) -> Result<(), SqlError> {
        self.eat_punct(';');
        if *self.peek() != Tok::End {
            return Err(self.unexpected("end of statement"));
        }
        Ok(())
    }

    fn statement(&mut self) -> Result<Statement, SqlError> {
        let start = self.pos();
        let Tok::Word(head) = self.peek().clone() else {
            return Err(self.unexpected("a statement keyword"));
        };
        self.bump();
        let st = match head.to_ascii_uppercase().as_str() {
            "CREATE" => {
                self.kw("TABLE")?;
                let table = self.name("a table name")?;
                self.punct('(')?;
                let mut columns = Vec::new();
                loop {
                    let name = self.name("a column name")?;
                    let ty_pos = self.pos();
                    let ty = match self.peek().clone() {
                        Tok::Word(t) if t.eq_ignore_ascii_case("INT") => ColumnType::Int,
                        Tok::Word(t) if t.eq_ignore_ascii_case("TEXT") => ColumnType::Text,
                        Tok::Word(t) => return Err(unsupported(ty_pos, format!("column type {t}"))),
                        _ => return Err(self.unexpected("a column type")),
                    };
                    self.bump();
                    if let Tok::Word(w) = self.peek() {
                        return Err(unsupported(self.pos(), format!("column constraint {w}")));
                    }
                    columns.push(ColumnDef { name, ty });
                    if !self.eat_punct(',') {
                        break;
                    }
                }
                self.punct(')')?;
                Statement::Op(SqlOperation::CreateTable { table, columns })
            }
            "DROP" => {
                self.kw("TABLE")?;
                Statement::Op(SqlOperation::DropTable { table: self.name("a table name")? })
            }
            "INSERT" => {
                self.kw("INTO")?;
                let table = self.name("a table name")?;
                self.punct('(')?;
                let mut cols = Vec::new();
                loop {
                    let p = self.pos();
                    cols.push((p, self.name("a column name")?));
                    if !self.eat_punct(',') {
                        break;
                    }
                }
                self.punct(')')?;
                self.kw("VALUES")?;
                let tuple_pos = self.pos();
                self.punct('(')?;
                let mut vals = Vec::new();
                loop {
                    vals.push(self.literal()?);
                    if !self.eat_punct(',') {
                        break;
                    }
                }
                self.punct(')')?;
                if *self.peek() == Tok::Punct(',') {
                    return Err(unsupported(self.pos(), "multi-row INSERT"));
                }
                if vals.len() != cols.len() {
                    return Err(syntax(
                        tuple_pos,
                        format!("{} columns but {} values", cols.len(), vals.len()),
                    ));
                }
                let mut values = BTreeMap::new();
                for ((p, c), v) in cols.into_iter().zip(vals) {
                    if values.insert(c.clone(), v).is_some() {
                        return Err(syntax(p, format!("duplicate column {c}")));
                    }
                }
                Statement::Op(SqlOperation::Insert { table, values })
            }
            "UPDATE" => {
                let table = self.name("a table name")?;
                self.kw("SET")?;
                let mut set = BTreeMap::new();
                loop {
                    let p = self.pos();
                    let (col, v) = self.equality()?;
                    if set.insert(col.clone(), v).is_some() {
                        return Err(syntax(p, format!("duplicate column {col}")));
                    }
                    if !self.eat_punct(',') {
                        break;
                    }
                }
                let filter = self.opt_where()?;
                Statement::Op(SqlOperation::Update { table, filter, set })
            }
            "DELETE" => {
                self.kw("FROM")?;
                let table = self.name("a table name")?;
                let filter = self.opt_where()?;
                Statement::Op(SqlOperation::Delete { table, filter })
            }
            "SELECT" => {
                if !self.eat_punct('*') {
                    return Err(match self.peek() {
                        Tok::Word(w) if w.eq_ignore_ascii_case("DISTINCT") => unsupported(self.pos(), "DISTINCT"),
                        Tok::Word(_) => unsupported(self.pos(), "projection (only SELECT * is supported)"),
                        _ => self.unexpected("'*'"),
                    });
                }
                self.kw("FROM")?;
                let table = self.name("a table name")?;
                if *self.peek() == Tok::Punct(',') {
                    return Err(unsupported(self.pos(), "joins"));
                }
                let filter = self.opt_where()?;
                Statement::Select { table, filter }
            }
            "GRANT" => {
                let mut perms = PermSet::EMPTY;
                loop {
                    let p = self.pos();
                    let perm = match self.peek().clone() {
                        Tok::Word(w) => Perm::ALL
                            .into_iter()
                            .find(|perm| perm.keyword().eq_ignore_ascii_case(&w))
                            .ok_or_else(|| unsupported(p, format!("permission {w}")))?,
                        _ => return Err(self.unexpected("a permission")),
                    };
                    self.bump();
                    perms = perms.with(perm);
                    if !self.eat_punct(',') {
                        break;
                    }
                }
                self.kw("ON")?;
                let table = self.name("a table name")?;
                self.kw("TO")?;
                let p = self.pos();
                let grantee = match self.bump().1 {
                    Tok::Word(w) | Tok::Str(w) | Tok::Num(w) => w.parse::<AccountId>().ok(),
                    _ => None,
                }
                .ok_or_else(|| syntax(p, "expected a 40-hex-digit account id"))?;
                Statement::Op(SqlOperation::Grant { table, grantee, perms })
            }
            other => return Err(unsupported(start, format!("statement {other}"))),
        };
        self.finish()?;
        if let Statement::Op(op) = &st {
            op.validate().map_err(|e| SqlError { position: start, kind: SqlErrorKind::Invalid(e.to_string()) })?;
        }
        Ok(st)
    }
}

pub fn parse_sql(text: &str) -> Result<Statement, SqlError> {
    if text.trim().is_empty() {
        return Err(syntax(1, "empty statement"));
    }
    let toks = lex(text)?;
    Parser { toks, at: 0 }.statement()
}

/// Parses a mutating statement; SELECT is refused.
pub fn parse_operation(text: &str) -> Result<SqlOperation, SqlError> {
    match parse_sql(text)? {
        Statement::Op(op) => Ok(op),
        Statement::Select { .. } => Err(SqlError {
            position: 1,
            kind: SqlErrorKind::Unsupported("SELECT where a mutating statement is required".into()),
        }),
    }
}

fn write_filter(f: &mut fmt::Formatter<'_>, filter: &[Predicate]) -> fmt::Result {
    for (i, p) in filter.iter().enumerate() {
        f.write_str(if i == 0 { " WHERE " } else { " AND " })?;
        write!(f, "{} = {}", p.column, p.value)?;
    }
    Ok(())
}

fn join<T>(items: impl IntoIterator<Item = T>, f: impl Fn(T) -> String) -> String {
    items.into_iter().map(f).collect::<Vec<_>>().join(", ")
}

pub struct Sql<'a>(pub &'a SqlOperation);

impl fmt::Display for Sql<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            SqlOperation::CreateTable { table, columns } => {
                write!(f, "CREATE TABLE {table} ({})", join(columns, |c| format!("{} {}", c.name, c.ty.keyword())))
            }
            SqlOperation::DropTable { table } => write!(f, "DROP TABLE {table}"),
            SqlOperation::Insert { table, values } => write!(
                f,
                "INSERT INTO {table} ({}) VALUES ({})",
                join(values.keys(), |k| k.clone()),
                join(values.values(), |v| v.to_string())
            ),
            SqlOperation::Update { table, filter, set } => {
                write!(f, "UPDATE {table} SET {}", join(set, |(k, v)| format!("{k} = {v}")))?;
                write_filter(f, filter)
            }
            SqlOperation::Delete { table, filter } => {
                write!(f, "DELETE FROM {table}")?;
                write_filter(f, filter)
            }
            SqlOperation::Grant { table, grantee, perms } => {
                write!(f, "GRANT {} ON {table} TO {grantee}", join(perms.iter(), |p| p.keyword().to_string()))
            }
        }
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::Op(op) => Sql(op).fmt(f),
            Statement::Select { table, filter } => {
                write!(f, "SELECT * FROM {table}")?;
                write_filter(f, filter)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn err(text: &str) -> SqlError {
        parse_sql(text).unwrap_err()
    }

    #[test]
    fn insert_base_case() {
        let st = parse_sql("INSERT INTO t (a) VALUES (1)").unwrap();
        let values = [("a".to_string(), Literal::Int(1))].into_iter().collect();
        assert_eq!(st, Statement::Op(SqlOperation::Insert { table: "t".into(), values }));
    }

    #[test]
    fn update_with_where() {
        let st = parse_sql("update t set a=5 where k='x' and j = -2;").unwrap();
        match st {
            Statement::Op(SqlOperation::Update { table, filter, set }) => {
                assert_eq!(table, "t");
                assert_eq!(set.get("a"), Some(&Literal::Int(5)));
                assert_eq!(filter, vec![Predicate::eq("k", Literal::Text("x".into())), Predicate::eq("j", Literal::Int(-2))]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quote_escape() {
        let st = parse_sql("SELECT * FROM t WHERE name = 'O''Brien'").unwrap();
        assert_eq!(
            st,
            Statement::Select { table: "t".into(), filter: vec![Predicate::eq("name", Literal::Text("O'Brien".into()))] }
        );
    }

    #[test]
    fn projection_is_named() {
        let e = err("SELECT name FROM t");
        assert_eq!(e.position, 8);
        assert!(matches!(e.kind, SqlErrorKind::Unsupported(ref c) if c.contains("projection")));
    }

    #[test]
    fn unsupported_constructs() {
        for (text, needle, pos) in [
            ("SELECT * FROM t WHERE a = 1 OR b = 2", "OR", 29),
            ("SELECT * FROM t ORDER BY a", "ORDER BY", 17),
            ("SELECT * FROM t JOIN u", "joins", 17),
            ("SELECT * FROM t, u", "joins", 16),
            ("SELECT * FROM t WHERE a < 1", "comparison", 25),
            ("INSERT INTO t (a) VALUES (NULL)", "NULL", 27),
            ("INSERT INTO t (a) VALUES (1), (2)", "multi-row", 29),
            ("CREATE TABLE t (a FLOAT)", "column type FLOAT", 19),
            ("ALTER TABLE t", "statement ALTER", 1),
            ("GRANT DROP ON t TO 00", "permission DROP", 7),
        ] {
            let e = err(text);
            match &e.kind {
                SqlErrorKind::Unsupported(c) => assert!(c.contains(needle), "{text}: {c}"),
                other => panic!("{text}: {other:?}"),
            }
            assert_eq!(e.position, pos, "{text}");
        }
    }

    #[test]
    fn syntax_positions() {
        assert_eq!(err("DROP TABLE").position, 11);
        assert_eq!(err("INSERT INTO t (a, b) VALUES (1)").position, 29);
        assert_eq!(err("SELECT * FROM t WHERE a = 'open").position, 27);
        assert_eq!(err("SELECT * FROM t extra").position, 17);
        assert_eq!(err("   ").position, 1);
        assert!(matches!(err("DELETE FROM t WHERE a = 99999999999999999999").kind, SqlErrorKind::Syntax(_)));
    }

    #[test]
    fn grant_parses_account() {
        let acct = AccountId([0xab; 20]);
        let st = parse_sql(&format!("GRANT select, UPDATE ON t TO {acct}")).unwrap();
        assert_eq!(
            st,
            Statement::Op(SqlOperation::Grant {
                table: "t".into(),
                grantee: acct,
                perms: PermSet::EMPTY.with(Perm::Select).with(Perm::Update),
            })
        );
    }

    #[test]
    fn invalid_ops_are_rejected() {
        assert!(parse_sql("INSERT INTO t (a) VALUES ('x')").is_ok());
        let long = "x".repeat(2000);
        assert!(matches!(err(&format!("INSERT INTO t (a) VALUES ('{long}')")).kind, SqlErrorKind::Invalid(_)));
    }

    fn name() -> impl Strategy<Value = String> {
        "[a-zA-Z_][a-zA-Z0-9_]{0,10}"
    }

    fn literal() -> impl Strategy<Value = Literal> {
        prop_oneof![any::<i64>().prop_map(Literal::Int), "(?s).{0,40}".prop_map(Literal::Text)]
    }

    fn filter() -> impl Strategy<Value = Vec<Predicate>> {
        prop::collection::vec((name(), literal()).prop_map(|(c, v)| Predicate { column: c, value: v }), 0..4)
    }

    fn assigns() -> impl Strategy<Value = BTreeMap<String, Literal>> {
        prop::collection::btree_map(name(), literal(), 1..4)
    }

    fn op() -> impl Strategy<Value = SqlOperation> {
        let col = (name(), prop_oneof![Just(ColumnType::Int), Just(ColumnType::Text)])
            .prop_map(|(n, ty)| ColumnDef { name: n, ty });
        prop_oneof![
            (name(), prop::collection::btree_map(name(), col, 1..5)).prop_map(|(table, cols)| {
                SqlOperation::CreateTable { table, columns: cols.into_values().enumerate().map(|(i, mut c)| {
                    c.name = format!("{}{i}", c.name);
                    c
                }).collect() }
            }),
            name().prop_map(|table| SqlOperation::DropTable { table }),
            (name(), assigns()).prop_map(|(table, values)| SqlOperation::Insert { table, values }),
            (name(), filter(), assigns()).prop_map(|(table, filter, set)| SqlOperation::Update { table, filter, set }),
            (name(), filter()).prop_map(|(table, filter)| SqlOperation::Delete { table, filter }),
            (name(), any::<[u8; 20]>(), 1u8..16).prop_map(|(table, g, bits)| {
                let perms = Perm::ALL
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| bits & (1 << i) != 0)
                    .fold(PermSet::EMPTY, |s, (_, p)| s.with(p));
                SqlOperation::Grant { table, grantee: AccountId(g), perms }
            }),
        ]
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(op in op()) {
            let text = Sql(&op).to_string();
            prop_assert_eq!(parse_operation(&text).unwrap(), op);
        }

        #[test]
        fn select_round_trip(table in name(), filter in filter()) {
            let st = Statement::Select { table, filter };
            prop_assert_eq!(parse_sql(&st.to_string()).unwrap(), st);
        }
    }
}
