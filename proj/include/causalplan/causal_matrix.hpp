#pragma once

// Causal Action Matrix: rows are next actions, columns are [state features ‖ previous
// action]. Built from trained gates, pruned of 2-cycles in the action-action block.

#include <Eigen/Dense>

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "causalplan/core.hpp"
#include "causalplan/feature_schema.hpp"
#include "causalplan/sca_model.hpp"

namespace causalplan {

struct CausalActionMatrix {
  Eigen::MatrixXd entries;                 // A x (S + A)
  std::size_t state_dim = 0;
  std::vector<std::string> action_names;   // row labels
  std::vector<std::string> parent_names;   // column labels
  std::string schema_fingerprint;
  std::string provenance;

  std::size_t action_dim() const { return static_cast<std::size_t>(entries.rows()); }
  std::size_t parent_dim() const { return static_cast<std::size_t>(entries.cols()); }
  /// Column holding previous action `row`.
  std::size_t action_column(std::size_t row) const { return state_dim + row; }

  std::optional<std::size_t> row_of(std::string_view name) const {
    for (std::size_t i = 0; i < action_names.size(); ++i)
      if (action_names[i] == name) return i;
    return std::nullopt;
  }
};

/// Zeroes the weaker direction of every bidirectional action pair; on a tie the edge whose
/// parent action has the higher index is removed. Self columns are zeroed.
inline void prune_action_cycles(Eigen::MatrixXd& entries, std::size_t state_dim) {
  const auto a = static_cast<std::size_t>(entries.rows());
  if (static_cast<std::size_t>(entries.cols()) != state_dim + a) throw SchemaMismatch("matrix is not A x (S + A)");
  for (std::size_t i = 0; i < a; ++i) entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(state_dim + i)) = 0.0;
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = i + 1; j < a; ++j) {
      double& from_j = entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(state_dim + j));  // j -> i
      double& from_i = entries(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(state_dim + i));  // i -> j
      if (from_j == 0.0 || from_i == 0.0) continue;
      if (from_i < from_j) from_i = 0.0;
      else from_j = 0.0;  // covers the tie: j is the higher-index parent
    }
}

inline CausalActionMatrix build_matrix(const StructuralGates& gates, const FeatureSchema& schema) {
  if (!gates.schema_fingerprint.empty() && gates.schema_fingerprint != schema.fingerprint())
    throw SchemaMismatch("gates were trained against a different feature schema");
  if (static_cast<std::size_t>(gates.values.rows()) != schema.parent_dim() ||
      static_cast<std::size_t>(gates.values.cols()) != schema.action_dim() || gates.state_dim != schema.state_dim())
    throw SchemaMismatch("gate matrix shape does not match schema");
  for (Eigen::Index c = 0; c < gates.values.cols(); ++c)
    for (Eigen::Index r = 0; r < gates.values.rows(); ++r) {
      const double v = gates.values(r, c);
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("gate value outside [0, 1]");
    }
  CausalActionMatrix m;
  m.entries = gates.values.transpose();
  m.state_dim = schema.state_dim();
  m.action_names = schema.action_features();
  m.parent_names = schema.parent_features();
  m.schema_fingerprint = schema.fingerprint();
  prune_action_cycles(m.entries, m.state_dim);
  return m;
}

/// All-zero matrix over the schema, convenient for hand-loading entries.
inline CausalActionMatrix empty_matrix(const FeatureSchema& schema) {
  CausalActionMatrix m;
  m.entries = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(schema.action_dim()),
                                    static_cast<Eigen::Index>(schema.parent_dim()));
  m.state_dim = schema.state_dim();
  m.action_names = schema.action_features();
  m.parent_names = schema.parent_features();
  m.schema_fingerprint = schema.fingerprint();
  return m;
}

/// Sets entry (child, parent) by feature name.
inline void set_entry(CausalActionMatrix& m, std::string_view child, std::string_view parent, double value) {
  const auto row = m.row_of(child);
  if (!row) throw ConfigError("unknown action '" + std::string(child) + "'");
  for (std::size_t c = 0; c < m.parent_names.size(); ++c)
    if (m.parent_names[c] == parent) {
      m.entries(static_cast<Eigen::Index>(*row), static_cast<Eigen::Index>(c)) = value;
      return;
    }
  throw ConfigError("unknown parent feature '" + std::string(parent) + "'");
}

/// Sum of row `row` over the active parent features.
inline double query_score(const CausalActionMatrix& m, const ActiveSet& active, std::size_t row) {
  if (row >= m.action_dim()) throw ConfigError("action row out of range");
  double s = 0.0;
  for (std::size_t j : active.indices) {
    if (j >= m.parent_dim()) throw SchemaMismatch("active feature index out of range");
    s += m.entries(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j));
  }
  return s;
}

inline double query_score(const CausalActionMatrix& m, const StateVector& state, const ActionVector& prev_action,
                          std::size_t row) {
  if (state.bits.size() != m.state_dim || prev_action.bits.size() != m.action_dim())
    throw SchemaMismatch("state/action dimensions do not match the matrix");
  return query_score(m, active_indices(state, prev_action), row);
}

inline double query_score(const CausalActionMatrix& m, const StateVector& state, const ActionVector& prev_action,
                          std::string_view action) {
  const auto row = m.row_of(action);
  if (!row) throw ConfigError("unknown action '" + std::string(action) + "'");
  return query_score(m, state, prev_action, *row);
}

inline double query_score(const CausalActionMatrix& m, const StateVector& state, const ActionVector& prev_action,
                          MacroAction action) {
  return query_score(m, state, prev_action, action_name(action));
}

/// Scores of every action row.
inline std::vector<double> query_all(const CausalActionMatrix& m, const StateVector& state,
                                     const ActionVector& prev_action) {
  if (state.bits.size() != m.state_dim || prev_action.bits.size() != m.action_dim())
    throw SchemaMismatch("state/action dimensions do not match the matrix");
  const ActiveSet active = active_indices(state, prev_action);
  std::vector<double> out(m.action_dim());
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = query_score(m, active, r);
  return out;
}

// ---------------------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Entries below `threshold` are written as 0 (visualization only).
inline void export_matrix(const CausalActionMatrix& m, const std::string& path,
                          std::optional<double> threshold = std::nullopt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write matrix file: " + path);
  out << "action";
  for (const auto& n : m.parent_names) out << ',' << n;
  out << '\n';
  for (std::size_t r = 0; r < m.action_dim(); ++r) {
    out << m.action_names[r];
    for (std::size_t c = 0; c < m.parent_dim(); ++c) {
      double v = m.entries(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      if (threshold && v < *threshold) v = 0.0;
      out << ',' << detail::format_g17(v);
    }
    out << '\n';
  }
  if (!out) throw ConfigError("failed writing matrix file: " + path);
}

inline CausalActionMatrix import_matrix(const std::string& path, const FeatureSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open matrix file: " + path);
  CausalActionMatrix m = empty_matrix(schema);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty matrix file " + path, 1);
  const auto header = detail::split_csv(line);
  if (header.size() != schema.parent_dim() + 1) throw SchemaMismatch("matrix header has the wrong number of columns");
  for (std::size_t c = 0; c < schema.parent_dim(); ++c)
    if (header[c + 1] != m.parent_names[c])
      throw SchemaMismatch("matrix column '" + header[c + 1] + "' does not match schema feature '" +
                           m.parent_names[c] + "'");
  std::size_t line_no = 1;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv(line);
    if (rows >= schema.action_dim()) throw ParseError("too many matrix rows", line_no);
    if (cells.size() != schema.parent_dim() + 1) throw ParseError("wrong number of cells", line_no);
    if (cells[0] != m.action_names[rows])
      throw SchemaMismatch("matrix row '" + cells[0] + "' does not match schema action '" + m.action_names[rows] + "'");
    for (std::size_t c = 0; c < schema.parent_dim(); ++c) {
      double v = 0;
      std::size_t used = 0;
      try {
        v = std::stod(cells[c + 1], &used);
      } catch (const std::exception&) {
        throw ParseError("non-numeric matrix value '" + cells[c + 1] + "'", line_no);
      }
      if (used != cells[c + 1].size()) throw ParseError("non-numeric matrix value '" + cells[c + 1] + "'", line_no);
      if (!(v >= 0.0 && v <= 1.0)) throw ParseError("matrix value " + cells[c + 1] + " outside [0, 1]", line_no);
      m.entries(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(c)) = v;
    }
    ++rows;
  }
  if (rows != schema.action_dim()) throw ParseError("matrix has " + std::to_string(rows) + " rows, expected " +
                                                        std::to_string(schema.action_dim()),
                                                    line_no);
  m.provenance = path;
  return m;
}

/// (parent, child, weight) triples, child-major in schema order.
inline void export_heatmap(const CausalActionMatrix& m, const std::string& path,
                           std::optional<double> threshold = std::nullopt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write heatmap file: " + path);
  out << "parent,child,weight\n";
  for (std::size_t r = 0; r < m.action_dim(); ++r)
    for (std::size_t c = 0; c < m.parent_dim(); ++c) {
      double v = m.entries(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      if (threshold && v < *threshold) v = 0.0;
      out << m.parent_names[c] << ',' << m.action_names[r] << ',' << detail::format_g17(v) << '\n';
    }
}

/// Number of action pairs with both directions nonzero.
inline std::size_t count_action_two_cycles(const CausalActionMatrix& m) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.action_dim(); ++i)
    for (std::size_t j = i + 1; j < m.action_dim(); ++j)
      if (m.entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m.action_column(j))) != 0.0 &&
          m.entries(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(m.action_column(i))) != 0.0)
        ++n;
  return n;
}

}  // namespace causalplan
