#include <cstdio>
#include <cstring>
#include <sstream>

#include "kkth/compiler.hpp"

// Text dump of a compiled system: catalogs with their lift definitions, then
// every row as dense labeled vectors. load_system() rebuilds the exact
// object, and emit(load(emit(s))) is byte-identical to emit(s).

namespace kkth::compiler {

namespace {

std::string num(double v) {
  char shortbuf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(shortbuf, sizeof(shortbuf), "%.*g", prec, v);
    if (std::strtod(shortbuf, nullptr) == v) return shortbuf;
  }
  return shortbuf;
}

const char* col_tag(ColClass c) {
  switch (c) {
    case ColClass::Input: return "x";
    case ColClass::Output: return "y";
    case ColClass::Aux: return "z";
    case ColClass::Mult: return "l";
  }
  return "?";
}

std::string col_str(Col c) {
  return std::string(col_tag(c.cls)) + ":" + std::to_string(c.idx);
}

Col parse_col(const std::string& s) {
  auto sep = s.find(':');
  if (sep == std::string::npos) throw std::runtime_error("bad column ref: " + s);
  Col c;
  std::string tag = s.substr(0, sep);
  if (tag == "x") c.cls = ColClass::Input;
  else if (tag == "y") c.cls = ColClass::Output;
  else if (tag == "z") c.cls = ColClass::Aux;
  else if (tag == "l") c.cls = ColClass::Mult;
  else throw std::runtime_error("bad column class: " + s);
  c.idx = std::stoi(s.substr(sep + 1));
  return c;
}

void emit_vec(std::ostringstream& out, const char* tag, const Eigen::RowVectorXd& v) {
  out << "  " << tag;
  for (int i = 0; i < v.size(); ++i) out << " " << num(v(i));
  out << "\n";
}

const char* mult_kind_tag(MultVar::Kind k) {
  switch (k) {
    case MultVar::Kind::EqFree: return "eqfree";
    case MultVar::Kind::EqPos: return "eqpos";
    case MultVar::Kind::EqSplitPlus: return "eqplus";
    case MultVar::Kind::EqSplitMinus: return "eqminus";
    case MultVar::Kind::IneqAlias: return "alias";
    case MultVar::Kind::IneqMult: return "ineq";
    case MultVar::Kind::IneqSlack: return "slack";
  }
  return "?";
}

MultVar::Kind parse_mult_kind(const std::string& s) {
  if (s == "eqfree") return MultVar::Kind::EqFree;
  if (s == "eqpos") return MultVar::Kind::EqPos;
  if (s == "eqplus") return MultVar::Kind::EqSplitPlus;
  if (s == "eqminus") return MultVar::Kind::EqSplitMinus;
  if (s == "alias") return MultVar::Kind::IneqAlias;
  if (s == "ineq") return MultVar::Kind::IneqMult;
  if (s == "slack") return MultVar::Kind::IneqSlack;
  throw std::runtime_error("bad multiplier kind: " + s);
}

const char* row_kind_tag(RowKind k) {
  switch (k) {
    case RowKind::Stationarity: return "stat";
    case RowKind::Equality: return "eq";
    case RowKind::AliasCoupling: return "couple";
    case RowKind::IneqFeasibility: return "feas";
    case RowKind::FbSum: return "fbsum";
    case RowKind::AuxRelation: return "rel";
    case RowKind::AuxLink: return "link";
    case RowKind::AuxExp: return "auxexp";
    case RowKind::InputRelation: return "inrel";
    case RowKind::InputExp: return "inexp";
  }
  return "?";
}

RowKind parse_row_kind(const std::string& s) {
  if (s == "stat") return RowKind::Stationarity;
  if (s == "eq") return RowKind::Equality;
  if (s == "couple") return RowKind::AliasCoupling;
  if (s == "feas") return RowKind::IneqFeasibility;
  if (s == "fbsum") return RowKind::FbSum;
  if (s == "rel") return RowKind::AuxRelation;
  if (s == "link") return RowKind::AuxLink;
  if (s == "auxexp") return RowKind::AuxExp;
  if (s == "inrel") return RowKind::InputRelation;
  if (s == "inexp") return RowKind::InputExp;
  throw std::runtime_error("bad row kind: " + s);
}

class LineReader {
 public:
  explicit LineReader(const std::string& text) : in_(text) {}

  std::istringstream line() {
    std::string l;
    while (std::getline(in_, l)) {
      if (l.empty() || l[0] == '#') continue;
      return std::istringstream(l);
    }
    throw std::runtime_error("unexpected end of system dump");
  }

 private:
  std::istringstream in_;
};

std::string rest_of(std::istringstream& in) {
  std::string tail;
  std::getline(in, tail);
  std::size_t start = tail.find_first_not_of(' ');
  return start == std::string::npos ? "" : tail.substr(start);
}

Eigen::RowVectorXd read_vec(std::istringstream& in, const char* tag, int n) {
  std::string t;
  in >> t;
  if (t != tag) throw std::runtime_error("expected vector " + std::string(tag) + ", got " + t);
  Eigen::RowVectorXd v(n);
  for (int i = 0; i < n; ++i) in >> v(i);
  return v;
}

}  // namespace

std::string emit_system(const StructuredSystem& sys) {
  std::ostringstream out;
  out << "# kkt-hardnet compiled system\n";
  for (const auto& s : sys.source) out << "# " << s << "\n";

  // Human-readable block matrices; the loader skips comments.
  const auto bl = sys.blocks();
  auto comment_matrix = [&out](const char* tag, const Eigen::MatrixXd& M) {
    for (int r = 0; r < M.rows(); ++r) {
      out << "# " << tag << (M.rows() > 1 ? "[" + std::to_string(r) + "]" : "") << ":";
      for (int c = 0; c < M.cols(); ++c) out << " " << num(M(r, c));
      out << "\n";
    }
  };
  auto comment_vector = [&out](const char* tag, const Eigen::VectorXd& v) {
    out << "# " << tag << ":";
    for (int i = 0; i < v.size(); ++i) out << " " << num(v(i));
    out << "\n";
  };
  out << "# block 1: A x + B y + A_x exp(x) + C_z z + C_lambda lambda = b\n";
  comment_matrix("A", bl.A);
  comment_matrix("B", bl.B);
  comment_matrix("A_x", bl.Ax);
  comment_matrix("C_z", bl.Cz);
  comment_matrix("C_lambda", bl.Cl);
  comment_vector("b", bl.b);
  out << "# block 2: D_y y + D_z z + D_lambda lambda = d\n";
  comment_matrix("D_y", bl.Dy);
  comment_matrix("D_z", bl.Dz);
  comment_matrix("D_lambda", bl.Dl);
  comment_vector("d", bl.d);
  out << "# block 3: E_y y + E_z z + E_lambda lambda = G exp(H_y y + H_z z)\n";
  comment_matrix("E_y", bl.Ey);
  comment_matrix("E_z", bl.Ez);
  comment_matrix("E_lambda", bl.El);
  comment_matrix("G", bl.G);
  comment_matrix("H_y", bl.Hy);
  comment_matrix("H_z", bl.Hz);

  out << "kkth-system 1\n";
  out << "kind " << (sys.is_kkt ? "kkt" : "structured") << "\n";
  const char* mode = sys.options.multiplier_mode == MultiplierMode::PaperExact ? "paper"
                     : sys.options.multiplier_mode == MultiplierMode::SignedSplit ? "signed"
                                                                                  : "strict";
  out << "options " << mode << " " << (sys.options.positive_inputs ? 1 : 0) << "\n";

  out << "raw-inputs " << sys.catalog.raw_inputs.size() << "\n";
  for (const auto& n : sys.catalog.raw_inputs) out << "  " << n << "\n";
  out << "outputs " << sys.catalog.outputs.size() << "\n";
  for (const auto& n : sys.catalog.outputs) out << "  " << n << "\n";

  out << "inputs " << sys.catalog.inputs.size() << "\n";
  for (const auto& v : sys.catalog.inputs) {
    switch (v.kind) {
      case InputVar::Kind::Base:
        out << "  base " << v.ref;
        break;
      case InputVar::Kind::Monomial: {
        out << "  mono " << v.powers.size();
        for (const auto& [raw, r] : v.powers) out << " " << raw << "^" << r.num << "/" << r.den;
        break;
      }
      case InputVar::Kind::Log:
        out << "  log " << v.ref;
        break;
    }
    out << " name= " << v.name << "\n";
  }

  out << "aux " << sys.catalog.aux.size() << "\n";
  for (const auto& v : sys.catalog.aux) {
    switch (v.kind) {
      case AuxVar::Kind::ExpOfCol:
        out << "  exp " << col_str(v.ref);
        break;
      case AuxVar::Kind::LogOfCol:
        out << "  log " << col_str(v.ref);
        break;
      case AuxVar::Kind::Affine: {
        out << "  aff " << v.affine.size();
        for (const auto& [c, w] : v.affine) out << " " << col_str(c) << " " << num(w);
        out << " " << num(v.affine_const);
        break;
      }
    }
    out << " name= " << v.name << "\n";
  }

  out << "mults " << sys.catalog.mults.size() << "\n";
  for (const auto& v : sys.catalog.mults)
    out << "  " << mult_kind_tag(v.kind) << " " << v.constraint_index << " name= " << v.name
        << "\n";

  out << "rows " << sys.rows.size() << "\n";
  for (const auto& r : sys.rows) {
    out << " row " << static_cast<int>(r.block) << " " << row_kind_tag(r.kind) << " "
        << r.stat_output << " " << num(r.rhs) << " " << r.defines_aux << " " << r.exp_index
        << " " << num(r.exp_coeff) << " label= " << r.label << "\n";
    emit_vec(out, "a", r.a);
    emit_vec(out, "ax", r.ax);
    emit_vec(out, "by", r.by);
    emit_vec(out, "cz", r.cz);
    emit_vec(out, "cl", r.cl);
  }

  out << "hrows " << sys.hrows.size() << "\n";
  for (const auto& h : sys.hrows) {
    emit_vec(out, "hy", h.hy);
    emit_vec(out, "hz", h.hz);
  }

  out << "stationarity " << sys.stationarity_rows.size();
  for (int r : sys.stationarity_rows) out << " " << r;
  out << "\n";

  out << "fb-chains " << sys.fb_chains.size() << "\n";
  for (const auto& c : sys.fb_chains) {
    out << "  " << c.ineq_index << " " << c.alias_col << " " << c.mu_col << " " << c.s_col
        << " " << c.feas_row << " " << c.sum_row;
    for (int zc : c.z) out << " " << zc;
    out << "\n";
  }

  out << "source " << sys.source.size() << "\n";
  for (const auto& s : sys.source) out << "  " << s << "\n";
  out << "end\n";
  return out.str();
}

StructuredSystem load_system(const std::string& text) {
  LineReader reader(text);
  StructuredSystem sys;
  std::string tok;
  int version = 0;

  auto header = [&](const char* expect) {
    auto line = reader.line();
    std::string t;
    line >> t;
    if (t != expect)
      throw std::runtime_error("expected '" + std::string(expect) + "', got " + t);
    return line;
  };

  {
    auto line = header("kkth-system");
    line >> version;
    if (version != 1) throw std::runtime_error("unsupported system dump version");
  }
  {
    auto line = header("kind");
    line >> tok;
    sys.is_kkt = tok == "kkt";
  }
  {
    auto line = header("options");
    int positive = 1;
    line >> tok >> positive;
    sys.options.multiplier_mode = tok == "paper"    ? MultiplierMode::PaperExact
                                  : tok == "signed" ? MultiplierMode::SignedSplit
                                                    : MultiplierMode::Strict;
    sys.options.positive_inputs = positive != 0;
  }

  std::size_t count = 0;
  {
    auto line = header("raw-inputs");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      auto l = reader.line();
      l >> tok;
      sys.catalog.raw_inputs.push_back(tok);
    }
  }
  {
    auto line = header("outputs");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      auto l = reader.line();
      l >> tok;
      sys.catalog.outputs.push_back(tok);
    }
  }
  {
    auto line = header("inputs");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      auto l = reader.line();
      InputVar v;
      l >> tok;
      if (tok == "base") {
        v.kind = InputVar::Kind::Base;
        l >> v.ref;
      } else if (tok == "mono") {
        v.kind = InputVar::Kind::Monomial;
        std::size_t np = 0;
        l >> np;
        for (std::size_t k = 0; k < np; ++k) {
          std::string pw;
          l >> pw;
          auto caret = pw.find('^');
          auto slash = pw.find('/');
          int raw = std::stoi(pw.substr(0, caret));
          long long pnum = std::stoll(pw.substr(caret + 1, slash - caret - 1));
          long long pden = std::stoll(pw.substr(slash + 1));
          v.powers.emplace_back(raw, expr::Rational(pnum, pden));
        }
      } else if (tok == "log") {
        v.kind = InputVar::Kind::Log;
        l >> v.ref;
      } else {
        throw std::runtime_error("bad input kind: " + tok);
      }
      l >> tok;  // name=
      v.name = rest_of(l);
      sys.catalog.inputs.push_back(std::move(v));
    }
  }
  {
    auto line = header("aux");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      auto l = reader.line();
      AuxVar v;
      l >> tok;
      if (tok == "exp" || tok == "log") {
        v.kind = tok == "exp" ? AuxVar::Kind::ExpOfCol : AuxVar::Kind::LogOfCol;
        std::string ref;
        l >> ref;
        v.ref = parse_col(ref);
      } else if (tok == "aff") {
        v.kind = AuxVar::Kind::Affine;
        std::size_t nt = 0;
        l >> nt;
        for (std::size_t k = 0; k < nt; ++k) {
          std::string ref;
          double w;
          l >> ref >> w;
          v.affine.emplace_back(parse_col(ref), w);
        }
        l >> v.affine_const;
      } else {
        throw std::runtime_error("bad aux kind: " + tok);
      }
      l >> tok;  // name=
      v.name = rest_of(l);
      sys.catalog.aux.push_back(std::move(v));
    }
  }
  {
    auto line = header("mults");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      auto l = reader.line();
      MultVar v;
      l >> tok >> v.constraint_index;
      v.kind = parse_mult_kind(tok);
      l >> tok;  // name=
      v.name = rest_of(l);
      sys.catalog.mults.push_back(std::move(v));
    }
  }

  const int m_aug = sys.catalog.m_aug(), p = sys.catalog.p(), q = sys.catalog.q(),
            L = sys.catalog.n_lambda();
  {
    auto line = header("rows");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      auto head = header("row");
      Row r;
      int block;
      head >> block >> tok >> r.stat_output >> r.rhs >> r.defines_aux >> r.exp_index >>
          r.exp_coeff;
      r.block = static_cast<RowBlock>(block);
      r.kind = parse_row_kind(tok);
      std::string marker;
      head >> marker;  // label=
      r.label = rest_of(head);
      auto la = reader.line();
      r.a = read_vec(la, "a", m_aug);
      auto lax = reader.line();
      r.ax = read_vec(lax, "ax", m_aug);
      auto lby = reader.line();
      r.by = read_vec(lby, "by", p);
      auto lcz = reader.line();
      r.cz = read_vec(lcz, "cz", q);
      auto lcl = reader.line();
      r.cl = read_vec(lcl, "cl", L);
      sys.rows.push_back(std::move(r));
    }
  }
  {
    auto line = header("hrows");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      HRow h;
      auto lhy = reader.line();
      h.hy = read_vec(lhy, "hy", p);
      auto lhz = reader.line();
      h.hz = read_vec(lhz, "hz", q);
      sys.hrows.push_back(std::move(h));
    }
  }
  {
    auto line = header("stationarity");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      int r;
      line >> r;
      sys.stationarity_rows.push_back(r);
    }
  }
  {
    auto line = header("fb-chains");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      auto l = reader.line();
      FbChain c;
      l >> c.ineq_index >> c.alias_col >> c.mu_col >> c.s_col >> c.feas_row >> c.sum_row;
      for (auto& zc : c.z) l >> zc;
      sys.fb_chains.push_back(c);
    }
  }
  {
    auto line = header("source");
    line >> count;
    for (std::size_t i = 0; i < count; ++i) {
      auto l = reader.line();
      sys.source.push_back(rest_of(l));
    }
  }
  header("end");
  return sys;
}

}  // namespace kkth::compiler
