#include "kkth/expr.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <sstream>

namespace kkth::expr {

// ---------------------------------------------------------------------------
// Rational

Rational::Rational(long long n, long long d) {
  if (d == 0) throw std::invalid_argument("rational with zero denominator");
  if (d < 0) {
    n = -n;
    d = -d;
  }
  long long g = std::gcd(n < 0 ? -n : n, d);
  if (g == 0) g = 1;
  num = n / g;
  den = d / g;
}

Rational Rational::operator+(const Rational& o) const {
  return Rational(num * o.den + o.num * den, den * o.den);
}
Rational Rational::operator-(const Rational& o) const {
  return Rational(num * o.den - o.num * den, den * o.den);
}
Rational Rational::operator*(const Rational& o) const {
  return Rational(num * o.num, den * o.den);
}

std::string to_string(const Rational& r) {
  if (r.den == 1) return std::to_string(r.num);
  return "(" + std::to_string(r.num) + "/" + std::to_string(r.den) + ")";
}

// ---------------------------------------------------------------------------
// Factories

namespace {
std::shared_ptr<Expr> make(Expr::Kind k) {
  auto e = std::make_shared<Expr>();
  e->kind = k;
  return e;
}
}  // namespace

ExprPtr constant(double v) {
  auto e = make(Expr::Kind::Const);
  e->value = v;
  return e;
}

ExprPtr variable(const std::string& name, VarClass cls) {
  auto e = make(Expr::Kind::Var);
  e->name = name;
  e->var_class = cls;
  return e;
}

ExprPtr sum(std::vector<std::pair<double, ExprPtr>> terms) {
  if (terms.empty()) throw std::invalid_argument("sum needs at least one term");
  if (terms.size() == 1 && terms[0].first == 1.0) return terms[0].second;
  auto e = make(Expr::Kind::Sum);
  e->terms = std::move(terms);
  return e;
}

ExprPtr product(std::vector<ExprPtr> factors) {
  if (factors.empty()) throw std::invalid_argument("product needs factors");
  if (factors.size() == 1) return factors[0];
  auto e = make(Expr::Kind::Product);
  e->factors = std::move(factors);
  return e;
}

ExprPtr power(ExprPtr base, Rational exponent) {
  if (exponent.is_zero()) return constant(1.0);
  if (exponent == Rational(1)) return base;
  auto e = make(Expr::Kind::Power);
  e->base = std::move(base);
  e->exponent = exponent;
  return e;
}

ExprPtr exp_of(ExprPtr arg) {
  auto e = make(Expr::Kind::Exp);
  e->arg = std::move(arg);
  return e;
}

ExprPtr log_of(ExprPtr arg) {
  auto e = make(Expr::Kind::Log);
  e->arg = std::move(arg);
  return e;
}

bool structurally_equal(const ExprPtr& a, const ExprPtr& b) {
  if (a == b) return true;
  if (a->kind != b->kind) return false;
  switch (a->kind) {
    case Expr::Kind::Const:
      return a->value == b->value;
    case Expr::Kind::Var:
      return a->name == b->name && a->var_class == b->var_class;
    case Expr::Kind::Sum: {
      if (a->terms.size() != b->terms.size()) return false;
      for (std::size_t i = 0; i < a->terms.size(); ++i) {
        if (a->terms[i].first != b->terms[i].first) return false;
        if (!structurally_equal(a->terms[i].second, b->terms[i].second)) return false;
      }
      return true;
    }
    case Expr::Kind::Product: {
      if (a->factors.size() != b->factors.size()) return false;
      for (std::size_t i = 0; i < a->factors.size(); ++i)
        if (!structurally_equal(a->factors[i], b->factors[i])) return false;
      return true;
    }
    case Expr::Kind::Power:
      return a->exponent == b->exponent && structurally_equal(a->base, b->base);
    case Expr::Kind::Exp:
    case Expr::Kind::Log:
      return structurally_equal(a->arg, b->arg);
  }
  return false;
}

// ---------------------------------------------------------------------------
// Evaluation

double eval_expr(const ExprPtr& e, const Point& point) {
  switch (e->kind) {
    case Expr::Kind::Const:
      return e->value;
    case Expr::Kind::Var: {
      auto it = point.find(e->name);
      if (it == point.end()) throw EvalError("unbound variable: " + e->name);
      return it->second;
    }
    case Expr::Kind::Sum: {
      double acc = 0.0;
      for (const auto& [c, sub] : e->terms) acc += c * eval_expr(sub, point);
      return acc;
    }
    case Expr::Kind::Product: {
      double acc = 1.0;
      for (const auto& f : e->factors) acc *= eval_expr(f, point);
      return acc;
    }
    case Expr::Kind::Power: {
      double b = eval_expr(e->base, point);
      const Rational& r = e->exponent;
      if (b == 0.0 && r.num < 0) throw EvalError("zero raised to a negative power");
      if (r.is_integer()) return std::pow(b, static_cast<double>(r.num));
      if (b < 0.0) throw EvalError("non-integer power of a negative base");
      return std::pow(b, r.value());
    }
    case Expr::Kind::Exp:
      return std::exp(eval_expr(e->arg, point));
    case Expr::Kind::Log: {
      double a = eval_expr(e->arg, point);
      if (a <= 0.0) throw EvalError("log of a non-positive argument");
      return std::log(a);
    }
  }
  throw EvalError("corrupt expression node");
}

// ---------------------------------------------------------------------------
// Normal form

bool Monomial::has_negative_power() const {
  for (const auto& p : powers)
    if (p.exp.num < 0) return true;
  return false;
}

namespace {

std::string monomial_key(const Monomial& m) {
  // Key ignores coefficient; powers are order-insensitive, opaque factors are
  // compared by rendered text.
  std::vector<std::string> parts;
  parts.reserve(m.powers.size() + m.opaque.size());
  for (const auto& p : m.powers) parts.push_back(p.name + "^" + to_string(p.exp));
  for (const auto& o : m.opaque) parts.push_back("@" + render(o));
  std::sort(parts.begin(), parts.end());
  std::string key;
  for (const auto& s : parts) {
    key += s;
    key += '|';
  }
  return key;
}

Monomial mul_monomials(const Monomial& a, const Monomial& b) {
  Monomial out;
  out.coeff = a.coeff * b.coeff;
  out.powers = a.powers;
  for (const auto& p : b.powers) {
    bool merged = false;
    for (auto& q : out.powers) {
      if (q.name == p.name) {
        q.exp = q.exp + p.exp;
        merged = true;
        break;
      }
    }
    if (!merged) out.powers.push_back(p);
  }
  out.powers.erase(std::remove_if(out.powers.begin(), out.powers.end(),
                                  [](const VarPow& p) { return p.exp.is_zero(); }),
                   out.powers.end());
  out.opaque = a.opaque;
  out.opaque.insert(out.opaque.end(), b.opaque.begin(), b.opaque.end());
  return out;
}

NormalForm mul_nf(const NormalForm& a, const NormalForm& b) {
  NormalForm out;
  out.monomials.reserve(a.monomials.size() * b.monomials.size());
  for (const auto& ma : a.monomials)
    for (const auto& mb : b.monomials) out.monomials.push_back(mul_monomials(ma, mb));
  return out;
}

void combine_like_terms(NormalForm& nf) {
  std::vector<Monomial> combined;
  std::map<std::string, std::size_t> index;
  for (auto& m : nf.monomials) {
    std::string key = monomial_key(m);
    auto it = index.find(key);
    if (it == index.end()) {
      index.emplace(std::move(key), combined.size());
      combined.push_back(std::move(m));
    } else {
      combined[it->second].coeff += m.coeff;
    }
  }
  combined.erase(std::remove_if(combined.begin(), combined.end(),
                                [](const Monomial& m) { return m.coeff == 0.0; }),
                 combined.end());
  nf.monomials = std::move(combined);
}

NormalForm opaque_nf(ExprPtr e) {
  Monomial m;
  m.opaque.push_back(std::move(e));
  return NormalForm{{std::move(m)}};
}

NormalForm pow_nf(const NormalForm& base, const Rational& r, const ExprPtr& base_expr) {
  if (r.is_zero()) return NormalForm{{Monomial{}}};
  if (base.monomials.empty()) {
    if (r.num < 0) throw EvalError("zero raised to a negative power during normalization");
    return NormalForm{};  // 0^positive
  }
  if (base.monomials.size() == 1) {
    const Monomial& m = base.monomials[0];
    Monomial out;
    if (m.coeff == 1.0) {
      out.coeff = 1.0;
    } else if (r.is_integer()) {
      out.coeff = std::pow(m.coeff, static_cast<double>(r.num));
    } else if (m.coeff > 0.0) {
      out.coeff = std::pow(m.coeff, r.value());
    } else {
      return opaque_nf(power(nf_to_expr(base), r));
    }
    out.powers = m.powers;
    for (auto& p : out.powers) p.exp = p.exp * r;
    out.powers.erase(std::remove_if(out.powers.begin(), out.powers.end(),
                                    [](const VarPow& p) { return p.exp.is_zero(); }),
                     out.powers.end());
    for (const auto& o : m.opaque) {
      // (o)^r distributes over factors; valid on the positive domains this
      // toolkit supports.
      if (o->kind == Expr::Kind::Power)
        out.opaque.push_back(power(o->base, o->exponent * r));
      else
        out.opaque.push_back(power(o, r));
    }
    return NormalForm{{std::move(out)}};
  }
  // Multi-term base: expand small positive integer powers, otherwise keep the
  // whole power opaque.
  if (r.is_integer() && r.num >= 2 && r.num <= 16) {
    NormalForm acc = base;
    for (long long i = 1; i < r.num; ++i) acc = mul_nf(acc, base);
    combine_like_terms(acc);
    return acc;
  }
  return opaque_nf(power(base_expr, r));
}

}  // namespace

NormalForm normalize_nf(const ExprPtr& e) {
  switch (e->kind) {
    case Expr::Kind::Const: {
      if (e->value == 0.0) return NormalForm{};
      Monomial m;
      m.coeff = e->value;
      return NormalForm{{std::move(m)}};
    }
    case Expr::Kind::Var: {
      Monomial m;
      m.powers.push_back(VarPow{e->name, e->var_class, Rational(1)});
      return NormalForm{{std::move(m)}};
    }
    case Expr::Kind::Sum: {
      NormalForm out;
      for (const auto& [c, sub] : e->terms) {
        NormalForm part = normalize_nf(sub);
        for (auto& m : part.monomials) {
          m.coeff *= c;
          out.monomials.push_back(std::move(m));
        }
      }
      combine_like_terms(out);
      return out;
    }
    case Expr::Kind::Product: {
      NormalForm acc = normalize_nf(e->factors[0]);
      for (std::size_t i = 1; i < e->factors.size(); ++i)
        acc = mul_nf(acc, normalize_nf(e->factors[i]));
      combine_like_terms(acc);
      return acc;
    }
    case Expr::Kind::Power: {
      NormalForm base = normalize_nf(e->base);
      NormalForm out = pow_nf(base, e->exponent, e->base);
      combine_like_terms(out);
      return out;
    }
    case Expr::Kind::Exp:
      if (e->arg->kind == Expr::Kind::Const && e->arg->value == 0.0)
        return NormalForm{{Monomial{}}};
      return opaque_nf(exp_of(nf_to_expr(normalize_nf(e->arg))));
    case Expr::Kind::Log:
      return opaque_nf(log_of(nf_to_expr(normalize_nf(e->arg))));
  }
  throw EvalError("corrupt expression node");
}

ExprPtr nf_to_expr(const NormalForm& nf) {
  if (nf.monomials.empty()) return constant(0.0);
  std::vector<std::pair<double, ExprPtr>> terms;
  terms.reserve(nf.monomials.size());
  for (const auto& m : nf.monomials) {
    std::vector<ExprPtr> factors;
    for (const auto& p : m.powers) factors.push_back(power(variable(p.name, p.cls), p.exp));
    for (const auto& o : m.opaque) factors.push_back(o);
    if (factors.empty()) {
      terms.emplace_back(m.coeff, constant(1.0));
    } else {
      terms.emplace_back(m.coeff, product(std::move(factors)));
    }
  }
  return sum(std::move(terms));
}

ExprPtr normalize(const ExprPtr& e) { return nf_to_expr(normalize_nf(e)); }

double eval_nf(const NormalForm& nf, const Point& point) {
  double acc = 0.0;
  for (const auto& m : nf.monomials) {
    double term = m.coeff;
    for (const auto& p : m.powers) {
      auto it = point.find(p.name);
      if (it == point.end()) throw EvalError("unbound variable: " + p.name);
      double v = it->second;
      if (v == 0.0 && p.exp.num < 0) throw EvalError("zero raised to a negative power");
      if (p.exp.is_integer())
        term *= std::pow(v, static_cast<double>(p.exp.num));
      else if (v < 0.0)
        throw EvalError("non-integer power of a negative base");
      else
        term *= std::pow(v, p.exp.value());
    }
    for (const auto& o : m.opaque) term *= eval_expr(o, point);
    acc += term;
  }
  return acc;
}

namespace {
bool expr_mentions(const ExprPtr& e, const std::string& var) {
  switch (e->kind) {
    case Expr::Kind::Const:
      return false;
    case Expr::Kind::Var:
      return e->name == var;
    case Expr::Kind::Sum:
      for (const auto& [c, sub] : e->terms)
        if (expr_mentions(sub, var)) return true;
      return false;
    case Expr::Kind::Product:
      for (const auto& f : e->factors)
        if (expr_mentions(f, var)) return true;
      return false;
    case Expr::Kind::Power:
      return expr_mentions(e->base, var);
    case Expr::Kind::Exp:
    case Expr::Kind::Log:
      return expr_mentions(e->arg, var);
  }
  return false;
}
}  // namespace

NormalForm differentiate_nf(const NormalForm& nf, const std::string& var) {
  NormalForm out;
  for (const auto& m : nf.monomials) {
    for (const auto& o : m.opaque)
      if (expr_mentions(o, var))
        throw EvalError("cannot differentiate through composite factor: " + render(o));
    for (std::size_t i = 0; i < m.powers.size(); ++i) {
      if (m.powers[i].name != var) continue;
      Monomial d = m;
      d.coeff *= m.powers[i].exp.value();
      d.powers[i].exp = d.powers[i].exp - Rational(1);
      if (d.powers[i].exp.is_zero()) d.powers.erase(d.powers.begin() + i);
      out.monomials.push_back(std::move(d));
    }
  }
  combine_like_terms(out);
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

bool needs_parens_in_product(const ExprPtr& e) { return e->kind == Expr::Kind::Sum; }

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  std::string s = buf;
  // Trim the verbose form when a short one round-trips.
  char shortbuf[40];
  for (int prec = 1; prec < 17; ++prec) {
    std::snprintf(shortbuf, sizeof(shortbuf), "%.*g", prec, v);
    if (std::strtod(shortbuf, nullptr) == v) return shortbuf;
  }
  return s;
}

std::string render_impl(const ExprPtr& e) {
  switch (e->kind) {
    case Expr::Kind::Const:
      return e->value < 0 ? "(" + format_number(e->value) + ")" : format_number(e->value);
    case Expr::Kind::Var:
      return e->name;
    case Expr::Kind::Sum: {
      std::string out;
      for (std::size_t i = 0; i < e->terms.size(); ++i) {
        double c = e->terms[i].first;
        const ExprPtr& sub = e->terms[i].second;
        std::string body = render_impl(sub);
        if (sub->kind == Expr::Kind::Sum) body = "(" + body + ")";
        std::string piece;
        if (c == 1.0)
          piece = body;
        else if (c == -1.0)
          piece = "-" + body;
        else
          piece = format_number(c) + "*" + body;
        if (i == 0) {
          out = piece;
        } else if (!piece.empty() && piece[0] == '-') {
          out += " - " + piece.substr(1);
        } else {
          out += " + " + piece;
        }
      }
      return out;
    }
    case Expr::Kind::Product: {
      std::string out;
      for (std::size_t i = 0; i < e->factors.size(); ++i) {
        std::string body = render_impl(e->factors[i]);
        if (needs_parens_in_product(e->factors[i])) body = "(" + body + ")";
        if (i) out += "*";
        out += body;
      }
      return out;
    }
    case Expr::Kind::Power: {
      std::string body = render_impl(e->base);
      if (e->base->kind != Expr::Kind::Var && e->base->kind != Expr::Kind::Const)
        body = "(" + body + ")";
      return body + "^" + to_string(e->exponent);
    }
    case Expr::Kind::Exp:
      return "exp(" + render_impl(e->arg) + ")";
    case Expr::Kind::Log:
      return "log(" + render_impl(e->arg) + ")";
  }
  return "?";
}

}  // namespace

std::string render(const ExprPtr& e) { return render_impl(e); }

std::string render(const Constraint& c) {
  return render(c.lhs) + (c.rel == Relation::Eq ? " = 0" : " <= 0");
}

// ---------------------------------------------------------------------------
// Parser

namespace {

struct Token {
  enum class Type { Number, Ident, Plus, Minus, Star, Slash, Caret, LParen, RParen, Eq, Le, Ge, End };
  Type type = Type::End;
  double number = 0.0;
  std::string ident;
  std::size_t pos = 0;
};

class Lexer {
 public:
  explicit Lexer(const std::string& text) : text_(text) {}

  Token next() {
    while (i_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[i_]))) ++i_;
    Token t;
    t.pos = i_;
    if (i_ >= text_.size()) {
      t.type = Token::Type::End;
      return t;
    }
    char c = text_[i_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      const char* start = text_.c_str() + i_;
      char* end = nullptr;
      t.number = std::strtod(start, &end);
      if (end == start) throw ParseError(i_, "malformed number");
      i_ += static_cast<std::size_t>(end - start);
      t.type = Token::Type::Number;
      return t;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i_;
      while (j < text_.size() &&
             (std::isalnum(static_cast<unsigned char>(text_[j])) || text_[j] == '_'))
        ++j;
      t.ident = text_.substr(i_, j - i_);
      t.type = Token::Type::Ident;
      i_ = j;
      return t;
    }
    ++i_;
    switch (c) {
      case '+': t.type = Token::Type::Plus; return t;
      case '-': t.type = Token::Type::Minus; return t;
      case '*': t.type = Token::Type::Star; return t;
      case '/': t.type = Token::Type::Slash; return t;
      case '^': t.type = Token::Type::Caret; return t;
      case '(': t.type = Token::Type::LParen; return t;
      case ')': t.type = Token::Type::RParen; return t;
      case '=': t.type = Token::Type::Eq; return t;
      case '<':
        if (i_ < text_.size() && text_[i_] == '=') {
          ++i_;
          t.type = Token::Type::Le;
          return t;
        }
        throw ParseError(t.pos, "strict '<' not supported; use <=");
      case '>':
        if (i_ < text_.size() && text_[i_] == '=') ++i_;
        t.type = Token::Type::Ge;
        return t;
      default:
        throw ParseError(t.pos, std::string("unexpected character '") + c + "'");
    }
  }

 private:
  const std::string& text_;
  std::size_t i_ = 0;
};

class Parser {
 public:
  Parser(const std::string& text, const VariableDecls& decls) : lexer_(text), decls_(decls) {
    advance();
  }

  // expr := term (('+'|'-') term)*
  ExprPtr parse_expr() {
    std::vector<std::pair<double, ExprPtr>> terms;
    terms.emplace_back(1.0, parse_term());
    while (cur_.type == Token::Type::Plus || cur_.type == Token::Type::Minus) {
      double sign = cur_.type == Token::Type::Plus ? 1.0 : -1.0;
      advance();
      terms.emplace_back(sign, parse_term());
    }
    return sum(std::move(terms));
  }

  std::pair<ExprPtr, Relation> parse_relation() {
    ExprPtr lhs = parse_expr();
    Relation rel;
    if (cur_.type == Token::Type::Eq) {
      rel = Relation::Eq;
    } else if (cur_.type == Token::Type::Le) {
      rel = Relation::Le;
    } else if (cur_.type == Token::Type::Ge) {
      throw ParseError(cur_.pos, "'>=' not supported; rewrite g >= 0 as -g <= 0");
    } else {
      throw ParseError(cur_.pos, "expected '=' or '<='");
    }
    advance();
    ExprPtr rhs = parse_expr();
    expect_end();
    // Fold "lhs REL rhs" into "lhs - rhs REL 0", splicing sums flat.
    std::vector<std::pair<double, ExprPtr>> terms;
    auto splice = [&terms](double sign, const ExprPtr& e) {
      if (e->kind == Expr::Kind::Sum) {
        for (const auto& [c, sub] : e->terms) terms.emplace_back(sign * c, sub);
      } else if (!(e->kind == Expr::Kind::Const && e->value == 0.0)) {
        terms.emplace_back(sign, e);
      }
    };
    splice(1.0, lhs);
    splice(-1.0, rhs);
    if (terms.empty()) terms.emplace_back(1.0, constant(0.0));
    return {sum(std::move(terms)), rel};
  }

  ExprPtr parse_expression_only() {
    ExprPtr e = parse_expr();
    expect_end();
    return e;
  }

 private:
  void advance() { cur_ = lexer_.next(); }

  void expect_end() {
    if (cur_.type != Token::Type::End)
      throw ParseError(cur_.pos, "unexpected trailing input");
  }

  // term := unary (('*'|'/') unary)*
  ExprPtr parse_term() {
    ExprPtr acc = parse_unary();
    while (cur_.type == Token::Type::Star || cur_.type == Token::Type::Slash) {
      bool div = cur_.type == Token::Type::Slash;
      advance();
      ExprPtr rhs = parse_unary();
      if (div) rhs = power(rhs, Rational(-1));
      if (acc->kind == Expr::Kind::Product) {
        std::vector<ExprPtr> fs = acc->factors;
        fs.push_back(rhs);
        acc = product(std::move(fs));
      } else {
        acc = product({acc, rhs});
      }
    }
    return acc;
  }

  // unary := '-' unary | postfix     ('^' binds tighter than unary minus)
  ExprPtr parse_unary() {
    if (cur_.type == Token::Type::Minus) {
      advance();
      ExprPtr sub = parse_unary();
      if (sub->kind == Expr::Kind::Const) return constant(-sub->value);
      return sum({{-1.0, sub}});
    }
    return parse_postfix();
  }

  ExprPtr parse_postfix() {
    ExprPtr base = parse_primary();
    if (cur_.type == Token::Type::Caret) {
      advance();
      Rational r = parse_exponent();
      return power(base, r);
    }
    return base;
  }

  // exponent := ['-'] INT | '(' ['-'] INT ['/' INT] ')'
  Rational parse_exponent() {
    bool paren = false;
    if (cur_.type == Token::Type::LParen) {
      paren = true;
      advance();
    }
    long long sign = 1;
    if (cur_.type == Token::Type::Minus) {
      sign = -1;
      advance();
    }
    long long num = parse_int("exponent");
    long long den = 1;
    if (paren && cur_.type == Token::Type::Slash) {
      advance();
      den = parse_int("exponent denominator");
    }
    if (paren) {
      if (cur_.type != Token::Type::RParen) throw ParseError(cur_.pos, "expected ')'");
      advance();
    }
    return Rational(sign * num, den);
  }

  long long parse_int(const char* what) {
    if (cur_.type != Token::Type::Number)
      throw ParseError(cur_.pos, std::string("expected integer ") + what);
    double v = cur_.number;
    long long i = static_cast<long long>(v);
    if (static_cast<double>(i) != v)
      throw ParseError(cur_.pos, std::string(what) + " must be an integer");
    advance();
    return i;
  }

  ExprPtr parse_primary() {
    switch (cur_.type) {
      case Token::Type::Number: {
        double v = cur_.number;
        advance();
        return constant(v);
      }
      case Token::Type::Ident: {
        std::string name = cur_.ident;
        std::size_t pos = cur_.pos;
        advance();
        if (name == "exp" || name == "log") {
          if (cur_.type != Token::Type::LParen)
            throw ParseError(cur_.pos, "expected '(' after " + name);
          advance();
          ExprPtr arg = parse_expr();
          if (cur_.type != Token::Type::RParen) throw ParseError(cur_.pos, "expected ')'");
          advance();
          return name == "exp" ? exp_of(arg) : log_of(arg);
        }
        if (decls_.is_input(name)) return variable(name, VarClass::Input);
        if (decls_.is_output(name)) return variable(name, VarClass::Output);
        throw ParseError(pos, "undeclared variable: " + name);
      }
      case Token::Type::LParen: {
        advance();
        ExprPtr e = parse_expr();
        if (cur_.type != Token::Type::RParen) throw ParseError(cur_.pos, "expected ')'");
        advance();
        return e;
      }
      default:
        throw ParseError(cur_.pos, "expected a number, variable, or '('");
    }
  }

  Lexer lexer_;
  const VariableDecls& decls_;
  Token cur_;
};

// Multiplies every monomial through by the least common denominator monomial
// so no variable keeps a negative exponent. Returns the human-readable note.
std::string clear_quotients(NormalForm& nf) {
  std::map<std::string, std::pair<VarClass, Rational>> worst;
  for (const auto& m : nf.monomials) {
    for (const auto& p : m.powers) {
      if (p.exp.num >= 0) continue;
      auto it = worst.find(p.name);
      Rational need = -p.exp;
      if (it == worst.end() || need.value() > it->second.second.value())
        worst[p.name] = {p.cls, need};
    }
  }
  if (worst.empty()) return "";
  Monomial mult;
  std::string note = "multiplied through by";
  for (const auto& [name, cp] : worst) {
    mult.powers.push_back(VarPow{name, cp.first, cp.second});
    note += " " + name + (cp.second == Rational(1) ? "" : "^" + to_string(cp.second));
  }
  NormalForm scaled;
  for (const auto& m : nf.monomials) scaled.monomials.push_back(mul_monomials(m, mult));
  combine_like_terms(scaled);
  nf = std::move(scaled);
  return note;
}

}  // namespace

// ---------------------------------------------------------------------------
// Declarations and constraints

bool VariableDecls::is_input(const std::string& n) const {
  return std::find(inputs.begin(), inputs.end(), n) != inputs.end();
}

bool VariableDecls::is_output(const std::string& n) const {
  return std::find(outputs.begin(), outputs.end(), n) != outputs.end();
}

void VariableDecls::validate() const {
  std::map<std::string, int> seen;
  for (const auto& n : inputs) {
    if (n.empty()) throw std::invalid_argument("empty input variable name");
    if (++seen[n] > 1) throw std::invalid_argument("duplicate variable declaration: " + n);
  }
  for (const auto& n : outputs) {
    if (n.empty()) throw std::invalid_argument("empty output variable name");
    if (++seen[n] > 1) throw std::invalid_argument("duplicate variable declaration: " + n);
  }
}

Constraint parse_constraint(const std::string& text, const VariableDecls& decls,
                            const std::string& label) {
  decls.validate();
  Parser parser(text, decls);
  auto [lhs, rel] = parser.parse_relation();
  Constraint c;
  c.lhs = lhs;
  c.rel = rel;
  c.label = label;
  c.cleared = normalize_nf(lhs);
  c.note = clear_quotients(c.cleared);
  return c;
}

ExprPtr parse_expression(const std::string& text, const VariableDecls& decls) {
  Parser parser(text, decls);
  return parser.parse_expression_only();
}

void ConstraintSet::validate() const {
  decls().validate();
  if (equalities.size() > outputs.size())
    throw std::invalid_argument("more equality constraints (" +
                                std::to_string(equalities.size()) + ") than outputs (" +
                                std::to_string(outputs.size()) + ")");
  auto check = [&](const Constraint& c) {
    for (const auto& m : c.cleared.monomials)
      for (const auto& p : m.powers)
        if (!decls().is_declared(p.name))
          throw std::invalid_argument("constraint " + c.label +
                                      " references undeclared variable " + p.name);
  };
  for (const auto& c : equalities) check(c);
  for (const auto& c : inequalities) check(c);
}

ConstraintSet parse_constraint_file(const std::string& text) {
  ConstraintSet cs;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  int auto_label = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);

    auto header = [&](const char* key) -> bool { return line.rfind(key, 0) == 0; };
    if (header("inputs:") || header("outputs:")) {
      bool is_inputs = header("inputs:");
      std::istringstream names(line.substr(is_inputs ? 7 : 8));
      std::string n;
      while (names >> n) (is_inputs ? cs.inputs : cs.outputs).push_back(n);
      continue;
    }

    std::string label;
    std::string body = line;
    auto colon = line.find(':');
    if (colon != std::string::npos) {
      label = line.substr(0, colon);
      auto e = label.find_last_not_of(" \t");
      label = e == std::string::npos ? "" : label.substr(0, e + 1);
      body = line.substr(colon + 1);
    }
    if (label.empty()) label = "c" + std::to_string(++auto_label);
    try {
      Constraint c = parse_constraint(body, cs.decls(), label);
      (c.rel == Relation::Eq ? cs.equalities : cs.inequalities).push_back(std::move(c));
    } catch (const ParseError& pe) {
      throw ParseError(pe.position, "line " + std::to_string(lineno) + ": " + pe.what());
    }
  }
  cs.validate();
  return cs;
}

ConstraintSet load_constraint_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (f == nullptr) throw std::runtime_error("cannot open constraint file: " + path);
  std::string text;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) text.append(buf, n);
  std::fclose(f);
  return parse_constraint_file(text);
}

std::vector<double> equality_residuals(const ConstraintSet& cs, const Point& p) {
  std::vector<double> out;
  out.reserve(cs.equalities.size());
  for (const auto& c : cs.equalities) out.push_back(eval_expr(c.lhs, p));
  return out;
}

std::vector<double> inequality_values(const ConstraintSet& cs, const Point& p) {
  std::vector<double> out;
  out.reserve(cs.inequalities.size());
  for (const auto& c : cs.inequalities) out.push_back(eval_expr(c.lhs, p));
  return out;
}

Point make_point(const ConstraintSet& cs, const std::vector<double>& x,
                 const std::vector<double>& y) {
  if (x.size() != cs.inputs.size() || y.size() != cs.outputs.size())
    throw std::invalid_argument("point dimension mismatch");
  Point p;
  for (std::size_t i = 0; i < x.size(); ++i) p[cs.inputs[i]] = x[i];
  for (std::size_t j = 0; j < y.size(); ++j) p[cs.outputs[j]] = y[j];
  return p;
}

}  // namespace kkth::expr
