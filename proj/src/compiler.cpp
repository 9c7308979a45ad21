#include "kkth/compiler.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>

namespace kkth::compiler {

using expr::Monomial;
using expr::NormalForm;
using expr::Rational;

namespace {

struct PendingRow {
  std::string label;
  RowBlock block = RowBlock::Constraint;
  RowKind kind = RowKind::Equality;
  std::vector<std::pair<Col, double>> lin;
  std::vector<std::pair<int, double>> ax;       // exp(augmented input) terms
  double rhs = 0.0;
  int stat_output = -1;
  std::vector<std::pair<Col, double>> exp_arg;  // over outputs/aux
  double exp_coeff = 0.0;
  int defines_aux = -1;
};

void add_lin(PendingRow& row, Col c, double v) {
  for (auto& [col, coef] : row.lin) {
    if (col == c) {
      coef += v;
      return;
    }
  }
  row.lin.emplace_back(c, v);
}

std::string col_key(Col c) {
  static const char* tags[] = {"x", "y", "z", "l"};
  return std::string(tags[static_cast<int>(c.cls)]) + std::to_string(c.idx);
}

// Canonical key of a product of column powers (order-insensitive).
std::string powers_key(std::vector<std::pair<Col, Rational>> pw) {
  std::sort(pw.begin(), pw.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::string key;
  for (const auto& [c, r] : pw) key += col_key(c) + "^" + expr::to_string(r) + "|";
  return key;
}

class Builder {
 public:
  Builder(const expr::ConstraintSet& cs, CompileOptions opts, bool kkt)
      : cs_(cs), opts_(opts), kkt_(kkt), style_a_(!kkt) {}

  StructuredSystem build() {
    cs_.validate();
    for (std::size_t i = 0; i < cs_.inputs.size(); ++i) {
      InputVar v;
      v.kind = InputVar::Kind::Base;
      v.ref = static_cast<int>(i);
      v.name = cs_.inputs[i];
      inputs_.push_back(std::move(v));
    }
    make_multipliers();
    make_skeleton();
    for (std::size_t i = 0; i < value_order_.size(); ++i) expand_value_chain(value_order_[i]);
    for (const auto& chain : fb_chains_)
      emit_fb_rows(chain, cs_.inequalities[chain.ineq_index].label);
    return finalize();
  }

 private:
  const expr::ConstraintSet& cs_;
  CompileOptions opts_;
  bool kkt_;
  bool style_a_;  // exponential equations get dedicated duplicate variables

  // ---- catalogs under construction ----------------------------------------
  std::vector<InputVar> inputs_;
  std::map<std::string, int> input_mono_index_;
  std::map<int, int> input_log_index_;  // input col -> log col

  struct AuxEntry {
    AuxVar var;
    std::string desc;
    std::vector<std::pair<Col, Rational>> powers;  // nonempty for value vars
    int log_handle = -1;
    bool link_emitted = false;
    int chain = -1;  // Style-A grouping
    int chain_rank = 0;
  };
  std::vector<AuxEntry> aux_;
  std::map<std::string, int> value_index_;
  std::map<std::string, int> unknown_log_index_;  // col key -> handle
  std::vector<int> value_order_;
  int next_chain_ = 0;

  std::vector<MultVar> mults_;
  std::vector<std::vector<int>> eq_mult_cols_;
  std::vector<std::vector<NormalForm>> eq_grads_, in_grads_;
  std::vector<FbChain> chains_;

  std::vector<PendingRow> skeleton_rows_;
  std::vector<PendingRow> input_rows_;
  std::vector<PendingRow> aux_rows_;
  std::vector<FbChain> fb_chains_;

  // ---- name lookups --------------------------------------------------------
  int raw_input_index(const std::string& name) const {
    for (std::size_t i = 0; i < cs_.inputs.size(); ++i)
      if (cs_.inputs[i] == name) return static_cast<int>(i);
    throw CompileError("unknown input variable: " + name);
  }

  int output_index(const std::string& name) const {
    for (std::size_t i = 0; i < cs_.outputs.size(); ++i)
      if (cs_.outputs[i] == name) return static_cast<int>(i);
    throw CompileError("unknown output variable: " + name);
  }

  std::string col_desc(Col c) const {
    switch (c.cls) {
      case ColClass::Input: return inputs_[c.idx].name;
      case ColClass::Output: return cs_.outputs[c.idx];
      case ColClass::Aux: return aux_[c.idx].desc;
      case ColClass::Mult: return mults_[c.idx].name;
    }
    return "?";
  }

  // ---- inputs ---------------------------------------------------------------
  std::pair<int, bool> get_input_log(int input_col) {
    auto it = input_log_index_.find(input_col);
    if (it != input_log_index_.end()) return {it->second, false};
    if (!opts_.positive_inputs)
      throw CompileError("input '" + inputs_[input_col].name +
                         "' enters a log chain but inputs are not declared positive");
    InputVar v;
    v.kind = InputVar::Kind::Log;
    v.ref = input_col;
    v.name = "log(" + inputs_[input_col].name + ")";
    int col = static_cast<int>(inputs_.size());
    inputs_.push_back(std::move(v));
    input_log_index_[input_col] = col;
    return {col, true};
  }

  void emit_input_exp_link(int value_col, int log_col) {
    PendingRow row;
    row.label = "lift " + inputs_[value_col].name;
    row.block = RowBlock::Constraint;
    row.kind = RowKind::InputExp;
    row.lin.emplace_back(Col{ColClass::Input, value_col}, 1.0);
    row.ax.emplace_back(log_col, -1.0);
    input_rows_.push_back(std::move(row));
  }

  int get_input_monomial(const std::vector<std::pair<int, Rational>>& raw_powers) {
    std::vector<std::pair<Col, Rational>> pw;
    for (const auto& [raw, r] : raw_powers) pw.emplace_back(Col{ColClass::Input, raw}, r);
    std::string key = powers_key(pw);
    auto it = input_mono_index_.find(key);
    if (it != input_mono_index_.end()) return it->second;

    InputVar v;
    v.kind = InputVar::Kind::Monomial;
    v.powers = raw_powers;
    for (std::size_t i = 0; i < raw_powers.size(); ++i) {
      if (i) v.name += "*";
      v.name += cs_.inputs[raw_powers[i].first];
      if (raw_powers[i].second != Rational(1))
        v.name += "^" + expr::to_string(raw_powers[i].second);
    }
    int value_col = static_cast<int>(inputs_.size());
    inputs_.push_back(v);
    input_mono_index_[key] = value_col;

    InputVar lv;
    lv.kind = InputVar::Kind::Log;
    lv.ref = value_col;
    lv.name = "log(" + v.name + ")";
    int log_col = static_cast<int>(inputs_.size());
    inputs_.push_back(std::move(lv));
    input_log_index_[value_col] = log_col;

    std::vector<std::pair<int, bool>> base_logs;
    base_logs.reserve(raw_powers.size());
    for (const auto& [raw, r] : raw_powers) {
      (void)r;
      base_logs.push_back(get_input_log(raw));
    }

    PendingRow rel;
    rel.label = "lift log " + v.name;
    rel.block = RowBlock::Constraint;
    rel.kind = RowKind::InputRelation;
    rel.lin.emplace_back(Col{ColClass::Input, log_col}, 1.0);
    for (std::size_t i = 0; i < raw_powers.size(); ++i)
      add_lin(rel, Col{ColClass::Input, base_logs[i].first}, -raw_powers[i].second.value());
    input_rows_.push_back(std::move(rel));

    emit_input_exp_link(value_col, log_col);
    for (std::size_t i = 0; i < raw_powers.size(); ++i)
      if (base_logs[i].second) emit_input_exp_link(raw_powers[i].first, base_logs[i].first);
    return value_col;
  }

  int input_log_with_link(int input_col) {
    auto [col, created] = get_input_log(input_col);
    if (created) emit_input_exp_link(input_col, col);
    return col;
  }

  // ---- unknown-side variables -----------------------------------------------
  void check_log_allowed(Col c) const {
    if (c.cls != ColClass::Mult) return;  // outputs/inputs/aux live on positive domains
    const MultVar& mv = mults_[c.idx];
    switch (mv.kind) {
      case MultVar::Kind::IneqMult:
      case MultVar::Kind::IneqSlack:
      case MultVar::Kind::EqPos:
      case MultVar::Kind::EqSplitPlus:
      case MultVar::Kind::EqSplitMinus:
        return;
      default:
        throw CompileError("multiplier " + mv.name +
                           " enters a log chain without sign information");
    }
  }

  std::pair<int, bool> get_unknown_log(Col c) {
    std::string key = col_key(c);
    auto it = unknown_log_index_.find(key);
    if (it != unknown_log_index_.end()) return {it->second, false};
    check_log_allowed(c);
    AuxEntry e;
    e.var.kind = AuxVar::Kind::LogOfCol;
    e.var.ref = c;
    e.desc = "log(" + col_desc(c) + ")";
    int handle = static_cast<int>(aux_.size());
    aux_.push_back(std::move(e));
    unknown_log_index_[key] = handle;
    return {handle, true};
  }

  int get_value_var(std::vector<std::pair<Col, Rational>> powers) {
    std::string key = powers_key(powers);
    auto it = value_index_.find(key);
    if (it != value_index_.end()) return it->second;
    AuxEntry e;
    e.powers = std::move(powers);
    for (std::size_t i = 0; i < e.powers.size(); ++i) {
      if (i) e.desc += "*";
      e.desc += col_desc(e.powers[i].first);
      if (e.powers[i].second != Rational(1))
        e.desc += "^" + expr::to_string(e.powers[i].second);
    }
    e.var.kind = AuxVar::Kind::ExpOfCol;  // ref set by ensure_value_log
    e.chain = next_chain_++;
    e.chain_rank = 200;
    int handle = static_cast<int>(aux_.size());
    aux_.push_back(std::move(e));
    value_index_[key] = handle;
    value_order_.push_back(handle);
    return handle;
  }

  // Creates factor logs (in factor order), then the value log.
  int ensure_value_log(int value_handle) {
    if (aux_[value_handle].log_handle >= 0) return aux_[value_handle].log_handle;
    int chain = aux_[value_handle].chain;
    std::vector<std::pair<Col, double>> affine;
    int base_rank = 400;
    const auto powers = aux_[value_handle].powers;
    for (const auto& [c, r] : powers) {
      if (c.cls == ColClass::Input) {
        int log_col = input_log_with_link(c.idx);
        affine.emplace_back(Col{ColClass::Input, log_col}, r.value());
      } else {
        auto [handle, created] = get_unknown_log(c);
        if (created && aux_[handle].chain < 0) {
          aux_[handle].chain = chain;
          aux_[handle].chain_rank = base_rank++;
        }
        affine.emplace_back(Col{ColClass::Aux, handle}, r.value());
      }
    }
    AuxEntry e;
    e.var.kind = AuxVar::Kind::Affine;
    e.var.affine = std::move(affine);
    e.desc = "log(" + aux_[value_handle].desc + ")";
    e.chain = chain;
    e.chain_rank = 300;
    int handle = static_cast<int>(aux_.size());
    aux_.push_back(std::move(e));
    aux_[value_handle].log_handle = handle;
    aux_[value_handle].var.ref = Col{ColClass::Aux, handle};
    return handle;
  }

  int make_dup(int log_handle, int rank) {
    AuxEntry e;
    e.var.kind = AuxVar::Kind::ExpOfCol;
    e.var.ref = Col{ColClass::Aux, log_handle};
    e.desc = "exp(" + aux_[log_handle].desc + ")";
    e.chain = aux_[log_handle].chain;
    e.chain_rank = rank;
    int handle = static_cast<int>(aux_.size());
    aux_.push_back(std::move(e));
    return handle;
  }

  // ---- chain row emission ------------------------------------------------------
  void emit_exp_row(const std::string& label, Col lhs, int log_handle, int defines) {
    PendingRow row;
    row.label = label;
    row.block = RowBlock::Exponential;
    row.kind = RowKind::AuxExp;
    row.lin.emplace_back(lhs, 1.0);
    row.exp_arg.emplace_back(Col{ColClass::Aux, log_handle}, 1.0);
    row.exp_coeff = 1.0;
    row.defines_aux = defines;
    aux_rows_.push_back(std::move(row));
  }

  void emit_factor_link(Col v, int log_handle) {
    if (aux_[log_handle].link_emitted) return;
    aux_[log_handle].link_emitted = true;
    std::string vdesc = col_desc(v);
    if (style_a_) {
      int dup = make_dup(log_handle, aux_[log_handle].chain_rank - 400);
      PendingRow link;
      link.label = "link " + vdesc;
      link.block = RowBlock::Affine;
      link.kind = RowKind::AuxLink;
      link.lin = {{v, 1.0}, {Col{ColClass::Aux, dup}, -1.0}};
      link.defines_aux = log_handle;
      aux_rows_.push_back(std::move(link));
      emit_exp_row("def " + aux_[dup].desc, Col{ColClass::Aux, dup}, log_handle, dup);
    } else {
      emit_exp_row("def " + vdesc, v, log_handle, log_handle);
    }
  }

  void expand_value_chain(int value_handle) {
    int log_handle = ensure_value_log(value_handle);
    const auto& powers = aux_[value_handle].powers;

    PendingRow rel;
    rel.label = "rel " + aux_[log_handle].desc;
    rel.kind = RowKind::AuxRelation;
    rel.defines_aux = log_handle;
    rel.lin.emplace_back(Col{ColClass::Aux, log_handle}, 1.0);
    bool has_input = false;
    for (const auto& [c, r] : powers) {
      if (c.cls == ColClass::Input) {
        add_lin(rel, Col{ColClass::Input, input_log_index_.at(c.idx)}, -r.value());
        has_input = true;
      } else {
        add_lin(rel, Col{ColClass::Aux, unknown_log_index_.at(col_key(c))}, -r.value());
      }
    }
    rel.block = has_input ? RowBlock::Constraint : RowBlock::Affine;
    aux_rows_.push_back(std::move(rel));

    for (const auto& [c, r] : powers) {
      (void)r;
      if (c.cls == ColClass::Input) continue;
      emit_factor_link(c, unknown_log_index_.at(col_key(c)));
    }

    if (style_a_) {
      int dup = make_dup(log_handle, 100);
      PendingRow link;
      link.label = "link " + aux_[value_handle].desc;
      link.block = RowBlock::Affine;
      link.kind = RowKind::AuxLink;
      link.lin = {{Col{ColClass::Aux, value_handle}, 1.0}, {Col{ColClass::Aux, dup}, -1.0}};
      link.defines_aux = value_handle;
      aux_rows_.push_back(std::move(link));
      emit_exp_row("def " + aux_[dup].desc, Col{ColClass::Aux, dup}, log_handle, dup);
    } else {
      emit_exp_row("def " + aux_[value_handle].desc, Col{ColClass::Aux, value_handle},
                   log_handle, value_handle);
    }
  }

  // ---- constraint translation ----------------------------------------------------
  void add_monomial(PendingRow& row, const Monomial& m, const std::string& where) {
    if (m.has_opaque())
      throw CompileError("unsupported composite factor in " + where + ": " +
                         expr::render(m.opaque.front()));
    if (m.is_constant()) {
      row.rhs -= m.coeff;
      return;
    }
    bool any_output = false;
    for (const auto& p : m.powers)
      if (p.cls == expr::VarClass::Output) any_output = true;

    if (!any_output) {
      if (m.powers.size() == 1 && m.powers[0].exp == Rational(1)) {
        add_lin(row, Col{ColClass::Input, raw_input_index(m.powers[0].name)}, m.coeff);
      } else {
        std::vector<std::pair<int, Rational>> raw;
        for (const auto& p : m.powers) raw.emplace_back(raw_input_index(p.name), p.exp);
        add_lin(row, Col{ColClass::Input, get_input_monomial(raw)}, m.coeff);
      }
      return;
    }
    if (m.powers.size() == 1 && m.powers[0].exp == Rational(1)) {
      add_lin(row, Col{ColClass::Output, output_index(m.powers[0].name)}, m.coeff);
      return;
    }
    std::vector<std::pair<Col, Rational>> pw;
    for (const auto& p : m.powers) {
      Col c = p.cls == expr::VarClass::Input
                  ? Col{ColClass::Input, raw_input_index(p.name)}
                  : Col{ColClass::Output, output_index(p.name)};
      pw.emplace_back(c, p.exp);
    }
    add_lin(row, Col{ColClass::Aux, get_value_var(std::move(pw))}, m.coeff);
  }

  void add_gradient_term(PendingRow& row, const std::vector<int>& mult_cols,
                         const Monomial& gm, const std::string& where) {
    if (gm.has_opaque())
      throw CompileError("unsupported composite factor in gradient of " + where);
    const bool split = mult_cols.size() == 2;
    if (gm.is_constant()) {
      add_lin(row, Col{ColClass::Mult, mult_cols[0]}, gm.coeff);
      if (split) add_lin(row, Col{ColClass::Mult, mult_cols[1]}, -gm.coeff);
      return;
    }
    for (std::size_t v = 0; v < mult_cols.size(); ++v) {
      std::vector<std::pair<Col, Rational>> pw;
      pw.emplace_back(Col{ColClass::Mult, mult_cols[v]}, Rational(1));
      for (const auto& p : gm.powers) {
        Col c = p.cls == expr::VarClass::Input
                    ? Col{ColClass::Input, raw_input_index(p.name)}
                    : Col{ColClass::Output, output_index(p.name)};
        pw.emplace_back(c, p.exp);
      }
      double sign = v == 0 ? 1.0 : -1.0;
      add_lin(row, Col{ColClass::Aux, get_value_var(std::move(pw))}, sign * gm.coeff);
    }
  }

  // ---- multipliers and skeleton rows -----------------------------------------------
  void make_multipliers() {
    if (!kkt_) return;
    const int p = static_cast<int>(cs_.outputs.size());
    const int n_eq = static_cast<int>(cs_.equalities.size());
    const int n_in = static_cast<int>(cs_.inequalities.size());
    auto gradients = [&](const expr::Constraint& c, std::vector<NormalForm>& grads) {
      bool nonlinear = false;
      grads.resize(p);
      for (int j = 0; j < p; ++j) {
        grads[j] = expr::differentiate_nf(c.cleared, cs_.outputs[j]);
        for (const auto& m : grads[j].monomials)
          if (!m.is_constant()) nonlinear = true;
      }
      return nonlinear;
    };
    eq_grads_.resize(n_eq);
    in_grads_.resize(n_in);
    eq_mult_cols_.resize(n_eq);
    chains_.resize(n_in);
    for (int k = 0; k < n_eq; ++k) {
      bool needs_chain = gradients(cs_.equalities[k], eq_grads_[k]);
      const std::string& label = cs_.equalities[k].label;
      if (!needs_chain) {
        mults_.push_back({"mu(" + label + ")", MultVar::Kind::EqFree, k});
        eq_mult_cols_[k] = {static_cast<int>(mults_.size()) - 1};
      } else if (opts_.multiplier_mode == MultiplierMode::PaperExact) {
        mults_.push_back({"mu(" + label + ")", MultVar::Kind::EqPos, k});
        eq_mult_cols_[k] = {static_cast<int>(mults_.size()) - 1};
      } else if (opts_.multiplier_mode == MultiplierMode::SignedSplit) {
        mults_.push_back({"mu+(" + label + ")", MultVar::Kind::EqSplitPlus, k});
        mults_.push_back({"mu-(" + label + ")", MultVar::Kind::EqSplitMinus, k});
        eq_mult_cols_[k] = {static_cast<int>(mults_.size()) - 2,
                            static_cast<int>(mults_.size()) - 1};
      } else {
        throw CompileError("equality multiplier mu(" + label +
                           ") enters a log chain without sign information "
                           "(strict mode; use signed-split)");
      }
    }
    for (int i = 0; i < n_in; ++i) {
      (void)gradients(cs_.inequalities[i], in_grads_[i]);
      chains_[i].ineq_index = i;
      mults_.push_back({"nu(" + cs_.inequalities[i].label + ")", MultVar::Kind::IneqAlias, i});
      chains_[i].alias_col = static_cast<int>(mults_.size()) - 1;
    }
    for (int i = 0; i < n_in; ++i) {
      mults_.push_back({"muI(" + cs_.inequalities[i].label + ")", MultVar::Kind::IneqMult, i});
      chains_[i].mu_col = static_cast<int>(mults_.size()) - 1;
    }
    for (int i = 0; i < n_in; ++i) {
      mults_.push_back({"s(" + cs_.inequalities[i].label + ")", MultVar::Kind::IneqSlack, i});
      chains_[i].s_col = static_cast<int>(mults_.size()) - 1;
    }
  }

  void make_skeleton() {
    const int p = static_cast<int>(cs_.outputs.size());
    const int n_eq = static_cast<int>(cs_.equalities.size());
    const int n_in = static_cast<int>(cs_.inequalities.size());
    if (kkt_) {
      for (int j = 0; j < p; ++j) {
        PendingRow row;
        row.label = "stat " + cs_.outputs[j];
        row.block = RowBlock::Constraint;
        row.kind = RowKind::Stationarity;
        row.stat_output = j;
        row.lin.emplace_back(Col{ColClass::Output, j}, 1.0);
        for (int k = 0; k < n_eq; ++k)
          for (const auto& m : eq_grads_[k][j].monomials)
            add_gradient_term(row, eq_mult_cols_[k], m, cs_.equalities[k].label);
        for (int i = 0; i < n_in; ++i)
          for (const auto& m : in_grads_[i][j].monomials)
            add_gradient_term(row, {chains_[i].alias_col}, m, cs_.inequalities[i].label);
        skeleton_rows_.push_back(std::move(row));
      }
    }
    for (int k = 0; k < n_eq; ++k) {
      PendingRow row;
      row.label = "eq " + cs_.equalities[k].label;
      row.block = RowBlock::Constraint;
      row.kind = RowKind::Equality;
      for (const auto& m : cs_.equalities[k].cleared.monomials)
        add_monomial(row, m, cs_.equalities[k].label);
      skeleton_rows_.push_back(std::move(row));
    }
    if (!kkt_) {
      for (int i = 0; i < n_in; ++i) {
        PendingRow row;
        row.label = "ineq " + cs_.inequalities[i].label;
        row.block = RowBlock::Constraint;
        row.kind = RowKind::IneqFeasibility;
        for (const auto& m : cs_.inequalities[i].cleared.monomials)
          add_monomial(row, m, cs_.inequalities[i].label);
        skeleton_rows_.push_back(std::move(row));
      }
      return;
    }
    for (int i = 0; i < n_in; ++i) {
      PendingRow row;
      row.label = "couple " + cs_.inequalities[i].label;
      row.block = RowBlock::Affine;
      row.kind = RowKind::AliasCoupling;
      row.lin = {{Col{ColClass::Mult, chains_[i].alias_col}, 1.0},
                 {Col{ColClass::Mult, chains_[i].mu_col}, -1.0}};
      skeleton_rows_.push_back(std::move(row));
    }
    for (int i = 0; i < n_in; ++i) {
      PendingRow row;
      row.label = "feas " + cs_.inequalities[i].label;
      row.block = RowBlock::Constraint;
      row.kind = RowKind::IneqFeasibility;
      for (const auto& m : cs_.inequalities[i].cleared.monomials)
        add_monomial(row, m, cs_.inequalities[i].label);
      add_lin(row, Col{ColClass::Mult, chains_[i].s_col}, 1.0);
      chains_[i].feas_row = static_cast<int>(skeleton_rows_.size());
      skeleton_rows_.push_back(std::move(row));
    }
    for (int i = 0; i < n_in; ++i) {
      build_fb_chain(chains_[i]);
      PendingRow row;
      row.label = "fb " + cs_.inequalities[i].label;
      row.block = RowBlock::Affine;
      row.kind = RowKind::FbSum;
      row.lin = {{Col{ColClass::Aux, fb_chains_.back().z[7]}, 1.0},
                 {Col{ColClass::Mult, chains_[i].mu_col}, -1.0},
                 {Col{ColClass::Mult, chains_[i].s_col}, -1.0}};
      fb_chains_.back().sum_row = static_cast<int>(skeleton_rows_.size());
      skeleton_rows_.push_back(std::move(row));
    }
  }

  // z1=mu^2, z2=s^2, z3=log mu, z4=log z1, z5=log s, z6=log z2,
  // z7=z1+z2, z8=sqrt(z7)=e^{z9}, z9=z10/2, z10=log z7.
  void build_fb_chain(FbChain& chain) {
    Col mu{ColClass::Mult, chain.mu_col};
    Col s{ColClass::Mult, chain.s_col};
    int z1 = get_value_var({{mu, Rational(2)}});
    int z2 = get_value_var({{s, Rational(2)}});
    ensure_value_log(z1);
    ensure_value_log(z2);

    int z7 = static_cast<int>(aux_.size());
    {
      AuxEntry e;
      e.var.kind = AuxVar::Kind::Affine;
      e.var.affine = {{Col{ColClass::Aux, z1}, 1.0}, {Col{ColClass::Aux, z2}, 1.0}};
      e.desc = aux_[z1].desc + "+" + aux_[z2].desc;
      aux_.push_back(std::move(e));
    }
    int z8 = static_cast<int>(aux_.size());
    {
      AuxEntry e;
      e.var.kind = AuxVar::Kind::ExpOfCol;
      e.desc = "sqrt(" + aux_[z7].desc + ")";
      aux_.push_back(std::move(e));
    }
    int z9 = static_cast<int>(aux_.size());
    {
      AuxEntry e;
      e.var.kind = AuxVar::Kind::Affine;
      e.desc = "log(" + aux_[z8].desc + ")";
      aux_.push_back(std::move(e));
    }
    int z10 = static_cast<int>(aux_.size());
    {
      AuxEntry e;
      e.var.kind = AuxVar::Kind::LogOfCol;
      e.var.ref = Col{ColClass::Aux, z7};
      e.desc = "log(" + aux_[z7].desc + ")";
      aux_.push_back(std::move(e));
    }
    aux_[z8].var.ref = Col{ColClass::Aux, z9};
    aux_[z9].var.affine = {{Col{ColClass::Aux, z10}, 0.5}};

    chain.z = {z1,
               z2,
               unknown_log_index_.at(col_key(mu)),
               aux_[z1].log_handle,
               unknown_log_index_.at(col_key(s)),
               aux_[z2].log_handle,
               z7,
               z8,
               z9,
               z10};
    fb_chains_.push_back(chain);
  }

  void emit_fb_rows(const FbChain& chain, const std::string& label) {
    {
      PendingRow row;
      row.label = "fb sum " + label;
      row.block = RowBlock::Affine;
      row.kind = RowKind::AuxRelation;
      row.defines_aux = chain.z[6];
      row.lin = {{Col{ColClass::Aux, chain.z[6]}, 1.0},
                 {Col{ColClass::Aux, chain.z[0]}, -1.0},
                 {Col{ColClass::Aux, chain.z[1]}, -1.0}};
      aux_rows_.push_back(std::move(row));
    }
    {
      PendingRow row;
      row.label = "fb half-log " + label;
      row.block = RowBlock::Affine;
      row.kind = RowKind::AuxRelation;
      row.defines_aux = chain.z[8];
      row.lin = {{Col{ColClass::Aux, chain.z[8]}, 1.0},
                 {Col{ColClass::Aux, chain.z[9]}, -0.5}};
      aux_rows_.push_back(std::move(row));
    }
    emit_exp_row("def " + aux_[chain.z[7]].desc, Col{ColClass::Aux, chain.z[7]}, chain.z[8],
                 chain.z[7]);
    emit_exp_row("def exp " + aux_[chain.z[9]].desc, Col{ColClass::Aux, chain.z[6]},
                 chain.z[9], chain.z[9]);
  }

  // ---- finalize ----------------------------------------------------------------
  StructuredSystem finalize() {
    std::vector<int> perm(aux_.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    if (style_a_) {
      std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
        if (aux_[a].chain != aux_[b].chain) return aux_[a].chain < aux_[b].chain;
        return aux_[a].chain_rank < aux_[b].chain_rank;
      });
    }
    std::vector<int> final_col(aux_.size());
    for (std::size_t i = 0; i < perm.size(); ++i) final_col[perm[i]] = static_cast<int>(i);

    StructuredSystem out;
    out.is_kkt = kkt_;
    out.options = opts_;
    out.catalog.raw_inputs = cs_.inputs;
    out.catalog.inputs = inputs_;
    out.catalog.outputs = cs_.outputs;
    out.catalog.mults = mults_;
    out.catalog.aux.resize(aux_.size());
    auto map_col = [&](Col c) {
      if (c.cls == ColClass::Aux) return Col{ColClass::Aux, final_col[c.idx]};
      return c;
    };
    for (std::size_t h = 0; h < aux_.size(); ++h) {
      AuxVar v = aux_[h].var;
      if (v.kind != AuxVar::Kind::Affine && v.ref.idx >= 0) v.ref = map_col(v.ref);
      for (auto& [c, w] : v.affine) c = map_col(c);
      v.name = "z" + std::to_string(final_col[h] + 1);
      if (!aux_[h].desc.empty()) v.name += " = " + aux_[h].desc;
      out.catalog.aux[final_col[h]] = std::move(v);
    }
    for (auto chain : fb_chains_) {
      for (auto& zcol : chain.z) zcol = final_col[zcol];
      out.fb_chains.push_back(chain);
    }

    const int m_aug = static_cast<int>(inputs_.size());
    const int p = static_cast<int>(cs_.outputs.size());
    const int q = static_cast<int>(aux_.size());
    const int n_lam = static_cast<int>(mults_.size());
    auto materialize = [&](const PendingRow& pr) {
      Row row;
      row.label = pr.label;
      row.block = pr.block;
      row.kind = pr.kind;
      row.rhs = pr.rhs;
      row.stat_output = pr.stat_output;
      row.defines_aux = pr.defines_aux >= 0 ? final_col[pr.defines_aux] : -1;
      row.a = Eigen::RowVectorXd::Zero(m_aug);
      row.ax = Eigen::RowVectorXd::Zero(m_aug);
      row.by = Eigen::RowVectorXd::Zero(p);
      row.cz = Eigen::RowVectorXd::Zero(q);
      row.cl = Eigen::RowVectorXd::Zero(n_lam);
      for (const auto& [c, v] : pr.lin) {
        switch (c.cls) {
          case ColClass::Input: row.a(c.idx) += v; break;
          case ColClass::Output: row.by(c.idx) += v; break;
          case ColClass::Aux: row.cz(final_col[c.idx]) += v; break;
          case ColClass::Mult: row.cl(c.idx) += v; break;
        }
      }
      for (const auto& [c, v] : pr.ax) row.ax(c) += v;
      if (pr.exp_coeff != 0.0) {
        HRow h;
        h.hy = Eigen::RowVectorXd::Zero(p);
        h.hz = Eigen::RowVectorXd::Zero(q);
        for (const auto& [c, v] : pr.exp_arg) {
          if (c.cls == ColClass::Output)
            h.hy(c.idx) += v;
          else
            h.hz(final_col[c.idx]) += v;
        }
        row.exp_index = static_cast<int>(out.hrows.size());
        row.exp_coeff = pr.exp_coeff;
        out.hrows.push_back(std::move(h));
      }
      return row;
    };

    for (const auto& r : skeleton_rows_) out.rows.push_back(materialize(r));
    for (const auto& r : input_rows_) out.rows.push_back(materialize(r));
    for (const auto& r : aux_rows_) out.rows.push_back(materialize(r));
    if (kkt_)
      for (int j = 0; j < p; ++j) out.stationarity_rows.push_back(j);

    for (const auto& c : cs_.equalities)
      out.source.push_back(c.label + " : " + expr::render(c) +
                           (c.note.empty() ? "" : "   (" + c.note + ")"));
    for (const auto& c : cs_.inequalities)
      out.source.push_back(c.label + " : " + expr::render(c) +
                           (c.note.empty() ? "" : "   (" + c.note + ")"));
    return out;
  }
};

bool same_inputs(const VariableCatalog& a, const VariableCatalog& b) {
  if (a.inputs.size() != b.inputs.size()) return false;
  for (std::size_t i = 0; i < a.inputs.size(); ++i) {
    const InputVar& u = a.inputs[i];
    const InputVar& v = b.inputs[i];
    if (u.kind != v.kind || u.ref != v.ref || u.powers.size() != v.powers.size()) return false;
    for (std::size_t j = 0; j < u.powers.size(); ++j)
      if (u.powers[j] != v.powers[j]) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------

StructuredSystem logexp_transform(const expr::ConstraintSet& cs, CompileOptions opts) {
  Builder b(cs, opts, /*kkt=*/false);
  return b.build();
}

KktSystem assemble_kkt(const StructuredSystem& sys, const expr::ConstraintSet& cs,
                       CompileOptions opts) {
  Builder b(cs, opts, /*kkt=*/true);
  KktSystem out;
  static_cast<StructuredSystem&>(out) = b.build();
  // The KKT system shares the feasibility transform's input augmentation; a
  // mismatch means `sys` was compiled from a different constraint set.
  if (!same_inputs(sys.catalog, out.catalog))
    throw CompileError("structured system does not match the constraint set");
  return out;
}

KktSystem compile_kkt(const expr::ConstraintSet& cs, CompileOptions opts) {
  return assemble_kkt(logexp_transform(cs, opts), cs, opts);
}

// ---------------------------------------------------------------------------

StructuredSystem::Blocks StructuredSystem::blocks() const {
  Blocks bl;
  for (int i = 0; i < n_rows(); ++i) {
    switch (rows[i].block) {
      case RowBlock::Constraint: bl.r1.push_back(i); break;
      case RowBlock::Affine: bl.r2.push_back(i); break;
      case RowBlock::Exponential: bl.r3.push_back(i); break;
    }
  }
  const int m_aug = catalog.m_aug(), p = catalog.p(), q = catalog.q(), L = catalog.n_lambda();
  auto fill = [&](const std::vector<int>& idx, Eigen::RowVectorXd Row::*member, int cols) {
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(static_cast<int>(idx.size()), cols);
    for (std::size_t r = 0; r < idx.size(); ++r)
      M.row(static_cast<int>(r)) = rows[idx[r]].*member;
    return M;
  };
  bl.A = fill(bl.r1, &Row::a, m_aug);
  bl.B = fill(bl.r1, &Row::by, p);
  bl.Ax = fill(bl.r1, &Row::ax, m_aug);
  bl.Cz = fill(bl.r1, &Row::cz, q);
  bl.Cl = fill(bl.r1, &Row::cl, L);
  bl.b.resize(static_cast<int>(bl.r1.size()));
  for (std::size_t r = 0; r < bl.r1.size(); ++r) bl.b(static_cast<int>(r)) = rows[bl.r1[r]].rhs;
  bl.Dy = fill(bl.r2, &Row::by, p);
  bl.Dz = fill(bl.r2, &Row::cz, q);
  bl.Dl = fill(bl.r2, &Row::cl, L);
  bl.d.resize(static_cast<int>(bl.r2.size()));
  for (std::size_t r = 0; r < bl.r2.size(); ++r) bl.d(static_cast<int>(r)) = rows[bl.r2[r]].rhs;
  bl.Ey = fill(bl.r3, &Row::by, p);
  bl.Ez = fill(bl.r3, &Row::cz, q);
  bl.El = fill(bl.r3, &Row::cl, L);
  const int n3 = static_cast<int>(bl.r3.size());
  bl.G = Eigen::MatrixXd::Zero(n3, n3);
  bl.Hy = Eigen::MatrixXd::Zero(n3, p);
  bl.Hz = Eigen::MatrixXd::Zero(n3, q);
  for (int r = 0; r < n3; ++r) {
    const Row& row = rows[bl.r3[static_cast<std::size_t>(r)]];
    bl.G(r, r) = row.exp_coeff;
    bl.Hy.row(r) = hrows[row.exp_index].hy;
    bl.Hz.row(r) = hrows[row.exp_index].hz;
  }
  return bl;
}

Eigen::VectorXd StructuredSystem::lift_inputs(const Eigen::VectorXd& x_raw,
                                              double eps_log) const {
  if (x_raw.size() != catalog.m()) throw std::invalid_argument("raw input dimension mismatch");
  Eigen::VectorXd x(catalog.m_aug());
  for (int i = 0; i < catalog.m_aug(); ++i) {
    const InputVar& v = catalog.inputs[i];
    switch (v.kind) {
      case InputVar::Kind::Base:
        x(i) = x_raw(v.ref);
        break;
      case InputVar::Kind::Monomial: {
        double acc = 1.0;
        for (const auto& [raw, r] : v.powers)
          acc *= r.is_integer() ? std::pow(x_raw(raw), static_cast<double>(r.num))
                                : std::pow(x_raw(raw), r.value());
        x(i) = acc;
        break;
      }
      case InputVar::Kind::Log:
        x(i) = std::log(std::max(x(v.ref), eps_log));
        break;
    }
  }
  return x;
}

Eigen::VectorXd StructuredSystem::complete_aux(const Eigen::VectorXd& x_aug,
                                               const Eigen::VectorXd& y,
                                               const Eigen::VectorXd& lambda,
                                               double eps_log) const {
  const int q = catalog.q();
  Eigen::VectorXd z = Eigen::VectorXd::Constant(q, std::numeric_limits<double>::quiet_NaN());
  std::vector<char> done(static_cast<std::size_t>(std::max(q, 1)), 0);
  auto value_of = [&](Col c, bool& ok) -> double {
    switch (c.cls) {
      case ColClass::Input: return x_aug(c.idx);
      case ColClass::Output: return y(c.idx);
      case ColClass::Mult: return lambda(c.idx);
      case ColClass::Aux:
        if (!done[static_cast<std::size_t>(c.idx)]) {
          ok = false;
          return 0.0;
        }
        return z(c.idx);
    }
    ok = false;
    return 0.0;
  };
  int remaining = q;
  for (int pass = 0; pass <= q && remaining > 0; ++pass) {
    for (int i = 0; i < q; ++i) {
      if (done[static_cast<std::size_t>(i)]) continue;
      const AuxVar& v = catalog.aux[i];
      bool ok = true;
      double val = 0.0;
      switch (v.kind) {
        case AuxVar::Kind::ExpOfCol:
          val = std::exp(value_of(v.ref, ok));
          break;
        case AuxVar::Kind::LogOfCol:
          val = std::log(std::max(value_of(v.ref, ok), eps_log));
          break;
        case AuxVar::Kind::Affine: {
          val = v.affine_const;
          for (const auto& [c, w] : v.affine) val += w * value_of(c, ok);
          break;
        }
      }
      if (ok) {
        z(i) = val;
        done[static_cast<std::size_t>(i)] = 1;
        --remaining;
      }
    }
  }
  if (remaining > 0) throw std::logic_error("auxiliary definitions contain a cycle");
  return z;
}

double StructuredSystem::eval_inequality(int k, const Eigen::VectorXd& x_aug,
                                         const Eigen::VectorXd& y,
                                         const Eigen::VectorXd& z) const {
  const Row& row = rows[fb_chains.at(static_cast<std::size_t>(k)).feas_row];
  double g = row.a.dot(x_aug) + row.by.dot(y) - row.rhs;
  if (z.size() == catalog.q()) g += row.cz.dot(z);
  return g;
}

// ---------------------------------------------------------------------------

AuditReport audit(const StructuredSystem& sys) {
  AuditReport rep;
  auto flag = [&](const std::string& p) {
    rep.ok = false;
    rep.problems.push_back(p);
  };
  const auto& cat = sys.catalog;
  std::vector<int> aux_defs(static_cast<std::size_t>(cat.q()), 0);
  std::vector<char> used_y(static_cast<std::size_t>(std::max(cat.p(), 1)), 0);
  std::vector<char> used_z(static_cast<std::size_t>(std::max(cat.q(), 1)), 0);
  std::vector<char> used_l(static_cast<std::size_t>(std::max(cat.n_lambda(), 1)), 0);
  for (const auto& row : sys.rows) {
    for (int j = 0; j < cat.p(); ++j)
      if (row.by(j) != 0.0) used_y[static_cast<std::size_t>(j)] = 1;
    for (int j = 0; j < cat.q(); ++j)
      if (row.cz(j) != 0.0) used_z[static_cast<std::size_t>(j)] = 1;
    for (int j = 0; j < cat.n_lambda(); ++j)
      if (row.cl(j) != 0.0) used_l[static_cast<std::size_t>(j)] = 1;
    if (row.exp_index >= 0) {
      const HRow& h = sys.hrows[row.exp_index];
      for (int j = 0; j < cat.p(); ++j)
        if (h.hy(j) != 0.0) used_y[static_cast<std::size_t>(j)] = 1;
      for (int j = 0; j < cat.q(); ++j)
        if (h.hz(j) != 0.0) used_z[static_cast<std::size_t>(j)] = 1;
    }
    if (row.defines_aux >= 0) ++aux_defs[static_cast<std::size_t>(row.defines_aux)];
  }
  for (int j = 0; j < cat.p(); ++j)
    if (!used_y[static_cast<std::size_t>(j)]) flag("output column unused: " + cat.outputs[j]);
  for (int j = 0; j < cat.q(); ++j)
    if (!used_z[static_cast<std::size_t>(j)]) flag("auxiliary column unused: " + cat.aux[j].name);
  for (int j = 0; j < cat.n_lambda(); ++j)
    if (!used_l[static_cast<std::size_t>(j)])
      flag("multiplier column unused: " + cat.mults[j].name);
  for (int j = 0; j < cat.q(); ++j)
    if (aux_defs[static_cast<std::size_t>(j)] != 1)
      flag("auxiliary " + cat.aux[j].name + " has " +
           std::to_string(aux_defs[static_cast<std::size_t>(j)]) + " defining rows");

  if (sys.is_kkt) {
    if (static_cast<int>(sys.stationarity_rows.size()) != cat.p())
      flag("stationarity block is not p rows");
    for (std::size_t j = 0; j < sys.stationarity_rows.size(); ++j) {
      const Row& row = sys.rows[sys.stationarity_rows[j]];
      if (row.stat_output != static_cast<int>(j)) flag("stationarity hook mismatch");
      for (int i = 0; i < cat.p(); ++i) {
        double want = i == static_cast<int>(j) ? 1.0 : 0.0;
        if (row.by(i) != want) flag("stationarity block is not the identity on y");
      }
    }
  }
  for (const auto& row : sys.rows) {
    bool has_ax = row.ax.size() > 0 && row.ax.cwiseAbs().maxCoeff() > 0.0;
    if (row.block == RowBlock::Exponential && (has_ax || row.exp_index < 0))
      flag("exponential block row malformed: " + row.label);
    if (row.block != RowBlock::Exponential && row.exp_index >= 0)
      flag("unknown-side exponential outside block 3: " + row.label);
    if (row.block == RowBlock::Affine && has_ax)
      flag("affine block row with input exponential: " + row.label);
  }
  return rep;
}

bool matches_up_to_row_permutation(const Eigen::MatrixXd& lhs, const Eigen::MatrixXd& rhs,
                                   double tol) {
  if (lhs.rows() != rhs.rows() || lhs.cols() != rhs.cols()) return false;
  const int n = static_cast<int>(lhs.rows());
  std::vector<char> used(static_cast<std::size_t>(std::max(n, 1)), 0);
  auto row_match = [&](int i, int j) {
    double dp = (lhs.row(i) - rhs.row(j)).cwiseAbs().maxCoeff();
    double dm = (lhs.row(i) + rhs.row(j)).cwiseAbs().maxCoeff();
    return dp <= tol || dm <= tol;
  };
  std::function<bool(int)> place = [&](int i) -> bool {
    if (i == n) return true;
    for (int j = 0; j < n; ++j) {
      if (used[static_cast<std::size_t>(j)] || !row_match(i, j)) continue;
      used[static_cast<std::size_t>(j)] = 1;
      if (place(i + 1)) return true;
      used[static_cast<std::size_t>(j)] = 0;
    }
    return false;
  };
  return place(0);
}

}  // namespace kkth::compiler
