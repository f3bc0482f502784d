#include "metaite/datagen.hpp"
#include "metaite/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace metaite {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& c : out)
    if (!c.empty() && c.back() == '\r') c.pop_back();
  return out;
}

namespace {

bool is_covariate_name(const std::string& s) {
  if (s.size() < 2 || s[0] != 'x') return false;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] < '0' || s[i] > '9') return false;
  return true;
}

}  // namespace

ObservationalDataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open '" + path + "'");

  std::optional<TaskKind> kind = schema.kind;
  std::optional<int> k = schema.k;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string tok;
      while (ss >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "kind" && !kind) kind = task_kind_from_string(val);
        if (key == "k" && !k) k = static_cast<int>(parse_double(val));
      }
      continue;
    }
    header = split_csv_line(line);
    break;
  }
  if (header.empty()) throw std::runtime_error("load_csv: '" + path + "' has no header");

  std::vector<std::size_t> cov_cols, pot_cols;
  std::optional<std::size_t> t_col, y_col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& h = header[c];
    if (is_covariate_name(h)) {
      cov_cols.push_back(c);
    } else if (h == "treatment") {
      t_col = c;
    } else if (h == "y_factual") {
      y_col = c;
    } else if (h.rfind("y_potential_", 0) == 0) {
      if (h != "y_potential_" + std::to_string(pot_cols.size()))
        throw std::runtime_error("load_csv: potential-outcome columns must be y_potential_0.. in order");
      pot_cols.push_back(c);
    } else {
      throw std::runtime_error("load_csv: unexpected column '" + h + "'");
    }
  }
  if (cov_cols.empty() || !t_col || !y_col)
    throw std::runtime_error("load_csv: header needs covariates x0.., treatment and y_factual");

  std::vector<std::vector<double>> rows;
  std::vector<int> t;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("load_csv: line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                               " columns, expected " + std::to_string(header.size()));
    std::vector<double> vals(cells.size());
    try {
      for (std::size_t c = 0; c < cells.size(); ++c) vals[c] = parse_double(cells[c]);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("load_csv: line " + std::to_string(line_no) + ": " + e.what());
    }
    const double tv = vals[*t_col];
    if (tv != static_cast<double>(static_cast<int>(tv)) || tv < 0)
      throw std::runtime_error("load_csv: line " + std::to_string(line_no) + ": treatment must be a non-negative integer");
    t.push_back(static_cast<int>(tv));
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw std::runtime_error("load_csv: no data rows");

  ObservationalDataset d;
  int max_t = 0;
  for (int v : t) max_t = std::max(max_t, v);
  d.k = k.value_or(pot_cols.empty() ? std::max(2, max_t + 1) : static_cast<int>(pot_cols.size()));
  d.kind = kind.value_or(TaskKind::regression);
  if (!pot_cols.empty() && static_cast<int>(pot_cols.size()) != d.k)
    throw std::runtime_error("load_csv: number of potential-outcome columns disagrees with k");
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] >= d.k)
      throw std::runtime_error("load_csv: row " + std::to_string(i + 1) + ": treatment " + std::to_string(t[i]) +
                               " out of range for k=" + std::to_string(d.k));

  const auto n = static_cast<Index>(rows.size());
  d.x.resize(n, static_cast<Index>(cov_cols.size()));
  d.y_factual.resize(n);
  if (!pot_cols.empty()) d.y_all = Matrix(n, d.k);
  for (Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < cov_cols.size(); ++j) d.x(i, static_cast<Index>(j)) = r[cov_cols[j]];
    d.y_factual(i) = r[*y_col];
    for (std::size_t j = 0; j < pot_cols.size(); ++j) (*d.y_all)(i, static_cast<Index>(j)) = r[pot_cols[j]];
  }
  d.t = std::move(t);
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("load_csv: ") + e.what());
  }
  if (schema.standardize) d.x = Standardizer::fit(d.x).apply(d.x);
  return d;
}

void save_csv(const std::string& path, const ObservationalDataset& data) {
  data.validate();
  std::ostringstream out;
  out << "# metaite-dataset kind=" << to_string(data.kind) << " k=" << data.k << "\n";
  for (Index j = 0; j < data.dim(); ++j) out << 'x' << j << ',';
  out << "treatment,y_factual";
  if (data.y_all)
    for (int j = 0; j < data.k; ++j) out << ",y_potential_" << j;
  out << "\n";
  for (Index i = 0; i < data.size(); ++i) {
    for (Index j = 0; j < data.dim(); ++j) out << format_double(data.x(i, j)) << ',';
    out << data.t[static_cast<std::size_t>(i)] << ',' << format_double(data.y_factual(i));
    if (data.y_all)
      for (int j = 0; j < data.k; ++j) out << ',' << format_double((*data.y_all)(i, j));
    out << "\n";
  }
  write_file_atomic(path, out.str());
}

}  // namespace metaite
