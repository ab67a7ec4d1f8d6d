#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "adaptrial/engine.hpp"
#include "adaptrial/toml.hpp"
#include "json.hpp"

namespace adaptrial {

/** Carries every problem found in a config, not just the first. */
class ConfigError : public std::runtime_error {
 public:
  std::vector<std::string> issues;

  explicit ConfigError(std::vector<std::string> iss)
      : std::runtime_error(join(iss)), issues(std::move(iss)) {}

 private:
  static std::string join(const std::vector<std::string>& iss) {
    std::string out = "configuration invalid:";
    for (const auto& i : iss) out += "\n  - " + i;
    return out;
  }
};

struct DesignConfig {
  std::string name;
  std::vector<int> stage_sizes;
  std::string stage1 = "cir:0.5";  // "cir:<p>" | "optimized-cir" | "optimized-cdr"
  std::string adapt;               // "cir" | "cdr"; required when there are 2+ stages
  std::string variance_model = "logistic";  // "logistic" | "empirical"
  std::vector<std::string> estimators{"simple", "optimized"};

  int stages() const { return static_cast<int>(stage_sizes.size()); }
};

/**
 * A full study definition: one population family, a grid of effect sizes and
 * adaptation-covariate choices, and the designs to compare on every grid cell.
 */
struct StudyConfig {
  std::string name;
  int setting = 1;
  int replications = 2000;
  std::uint64_t seed = 1;
  double level = 0.95;
  double clamp = 0.05;
  Link link = Link::logit;
  int preliminary_n = 0;
  std::string reference_design;  // defaults to the first design
  std::string reference_estimator = "optimized";

  Vec mean;
  Mat cov;
  double gamma0 = 0.0;
  std::vector<double> gamma1;  // grid axis
  Vec gamma2;
  Vec gamma3;

  std::vector<std::string> x_labels;  // grid axis, selector expressions
  std::vector<DesignConfig> designs;

  int dim() const { return static_cast<int>(mean.size()); }
};

// ---------------------------------------------------------------------------
// Selector expressions: '+'-joined terms "W<i>", each optionally dichotomized
// as "W<i>>=<t>". Indices are 1-based in expressions.
// ---------------------------------------------------------------------------

inline std::optional<CovariateSelector> parse_selector(const std::string& label, int dim,
                                                       std::vector<std::string>* issues) {
  auto fail = [&](const std::string& msg) -> std::optional<CovariateSelector> {
    if (issues) issues->push_back("selector '" + label + "': " + msg);
    return std::nullopt;
  };
  CovariateSelector sel;
  std::size_t pos = 0;
  bool ok = true;
  while (pos <= label.size()) {
    std::size_t plus = label.find('+', pos);
    std::string term = label.substr(pos, plus == std::string::npos ? plus : plus - pos);
    while (!term.empty() && term.front() == ' ') term.erase(term.begin());
    while (!term.empty() && term.back() == ' ') term.pop_back();
    if (term.empty()) {
      return fail("empty term");
    }
    if (term[0] != 'W') return fail("term '" + term + "' must start with W");
    std::size_t i = 1;
    while (i < term.size() && std::isdigit(static_cast<unsigned char>(term[i]))) ++i;
    if (i == 1) return fail("term '" + term + "' has no coordinate number");
    int index = 0;
    try {
      index = std::stoi(term.substr(1, i - 1));
    } catch (const std::exception&) {
      return fail("coordinate number out of range in '" + term + "'");
    }
    if (index < 1 || index > dim) {
      ok = false;
      if (issues)
        issues->push_back("selector '" + label + "': W" + std::to_string(index) +
                          " is outside 1.." + std::to_string(dim));
    }
    std::optional<double> threshold;
    if (i < term.size()) {
      if (term.compare(i, 2, ">=") != 0) return fail("term '" + term + "' is not W<i> or W<i>>=t");
      const std::string rest = term.substr(i + 2);
      try {
        std::size_t used = 0;
        threshold = std::stod(rest, &used);
        if (used != rest.size()) throw std::invalid_argument(rest);
      } catch (const std::exception&) {
        return fail("cannot parse threshold in '" + term + "'");
      }
    }
    for (int existing : sel.indices)
      if (existing == index - 1) return fail("W" + std::to_string(index) + " appears twice");
    sel.indices.push_back(index - 1);
    sel.thresholds.push_back(threshold);
    if (plus == std::string::npos) break;
    pos = plus + 1;
  }
  if (!ok) return std::nullopt;
  return sel;
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace study_detail {

inline const TomlValue* find(const TomlTable& t, const std::string& key) {
  auto it = t.find(key);
  return it == t.end() ? nullptr : &it->second;
}

inline void check_known_keys(const TomlTable& t, const std::string& where,
                             std::initializer_list<const char*> known,
                             std::vector<std::string>& issues) {
  for (const auto& [key, value] : t) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) ok = true;
    if (!ok) issues.push_back(where + ": unknown key '" + key + "'");
  }
}

inline bool get_number(const TomlTable& t, const std::string& where, const std::string& key,
                       std::vector<std::string>& issues, double& out) {
  const TomlValue* v = find(t, key);
  if (!v) return false;
  if (!v->is_number()) {
    issues.push_back(where + "." + key + " must be a number");
    return false;
  }
  out = v->as_number();
  return true;
}

inline bool get_int(const TomlTable& t, const std::string& where, const std::string& key,
                    std::vector<std::string>& issues, std::int64_t& out) {
  const TomlValue* v = find(t, key);
  if (!v) return false;
  if (!v->is_int()) {
    issues.push_back(where + "." + key + " must be an integer");
    return false;
  }
  out = v->as_int();
  return true;
}

inline bool get_string(const TomlTable& t, const std::string& where, const std::string& key,
                       std::vector<std::string>& issues, std::string& out) {
  const TomlValue* v = find(t, key);
  if (!v) return false;
  if (!v->is_string()) {
    issues.push_back(where + "." + key + " must be a string");
    return false;
  }
  out = v->as_string();
  return true;
}

inline bool number_array(const TomlValue& v, std::vector<double>& out) {
  if (!v.is_array()) return false;
  out.clear();
  for (const auto& e : v.as_array()) {
    if (!e.is_number()) return false;
    out.push_back(e.as_number());
  }
  return true;
}

inline bool get_vec(const TomlTable& t, const std::string& where, const std::string& key,
                    std::vector<std::string>& issues, Vec& out) {
  const TomlValue* v = find(t, key);
  if (!v) return false;
  std::vector<double> vals;
  if (!number_array(*v, vals)) {
    issues.push_back(where + "." + key + " must be an array of numbers");
    return false;
  }
  out = Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  return true;
}

inline bool get_mat(const TomlTable& t, const std::string& where, const std::string& key,
                    std::vector<std::string>& issues, Mat& out) {
  const TomlValue* v = find(t, key);
  if (!v) return false;
  if (!v->is_array()) {
    issues.push_back(where + "." + key + " must be an array of number rows");
    return false;
  }
  std::vector<std::vector<double>> rows;
  for (const auto& r : v->as_array()) {
    std::vector<double> row;
    if (!number_array(r, row)) {
      issues.push_back(where + "." + key + " must be an array of number rows");
      return false;
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) {
    issues.push_back(where + "." + key + " must not be empty");
    return false;
  }
  const std::size_t d = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != d) {
      issues.push_back(where + "." + key + " rows have unequal lengths");
      return false;
    }
  out.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return true;
}

inline bool get_string_array(const TomlTable& t, const std::string& where, const std::string& key,
                             std::vector<std::string>& issues, std::vector<std::string>& out) {
  const TomlValue* v = find(t, key);
  if (!v) return false;
  if (!v->is_array()) {
    issues.push_back(where + "." + key + " must be an array of strings");
    return false;
  }
  out.clear();
  for (const auto& e : v->as_array()) {
    if (!e.is_string()) {
      issues.push_back(where + "." + key + " must be an array of strings");
      return false;
    }
    out.push_back(e.as_string());
  }
  return true;
}

/** Shortest decimal string that parses back to exactly the same double. */
inline std::string shortest_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string file_tag(double v) {
  std::string s = shortest_double(v);
  std::string out;
  for (char c : s) {
    if (c == '.')
      out += 'p';
    else if (c == '-')
      out += 'm';
    else
      out += c;
  }
  return out;
}

/** Scenario-name fragment for a selector expression; filesystem-safe. */
inline std::string selector_tag(const std::string& label) {
  std::string out;
  for (std::size_t i = 0; i < label.size(); ++i) {
    char c = label[i];
    if (c == '>' && i + 1 < label.size() && label[i + 1] == '=') {
      out += "ge";
      ++i;
    } else if (std::isalnum(static_cast<unsigned char>(c)) || c == '+') {
      out += c;
    } else if (c == '.') {
      out += 'p';
    } else if (c == '-') {
      out += 'm';
    } else if (c != ' ') {
      out += '_';
    }
  }
  return out;
}

}  // namespace study_detail

inline StudyConfig parse_config(const std::string& text) {
  using namespace study_detail;
  TomlDoc doc;
  try {
    doc = toml_parse(text);
  } catch (const TomlError& e) {
    throw ConfigError({e.what()});
  }

  std::vector<std::string> issues;
  StudyConfig cfg;

  for (const auto& [key, value] : doc.root)
    issues.push_back("top level: unexpected key '" + key + "' outside any table");
  for (const auto& [name, table] : doc.tables)
    if (name != "study" && name != "population" && name != "grid")
      issues.push_back("unknown table [" + name + "]");
  for (const auto& [name, tables] : doc.table_arrays)
    if (name != "design") issues.push_back("unknown table array [[" + name + "]]");

  // [study]
  if (auto it = doc.tables.find("study"); it != doc.tables.end()) {
    const TomlTable& t = it->second;
    check_known_keys(t, "study",
                     {"name", "setting", "replications", "seed", "level", "clamp", "link",
                      "preliminary_n", "reference_design", "reference_estimator"},
                     issues);
    if (!get_string(t, "study", "name", issues, cfg.name) && !find(t, "name"))
      issues.push_back("study.name is required");
    std::int64_t iv = 0;
    if (get_int(t, "study", "setting", issues, iv)) cfg.setting = static_cast<int>(iv);
    if (get_int(t, "study", "replications", issues, iv)) cfg.replications = static_cast<int>(iv);
    if (get_int(t, "study", "seed", issues, iv)) {
      if (iv < 0)
        issues.push_back("study.seed must be nonnegative");
      else
        cfg.seed = static_cast<std::uint64_t>(iv);
    }
    double dv = 0.0;
    if (get_number(t, "study", "level", issues, dv)) cfg.level = dv;
    if (get_number(t, "study", "clamp", issues, dv)) cfg.clamp = dv;
    std::string sv;
    if (get_string(t, "study", "link", issues, sv)) {
      if (sv == "identity")
        cfg.link = Link::identity;
      else if (sv == "log")
        cfg.link = Link::log;
      else if (sv == "logit")
        cfg.link = Link::logit;
      else
        issues.push_back("study.link must be identity, log, or logit (got '" + sv + "')");
    }
    if (get_int(t, "study", "preliminary_n", issues, iv)) cfg.preliminary_n = static_cast<int>(iv);
    get_string(t, "study", "reference_design", issues, cfg.reference_design);
    get_string(t, "study", "reference_estimator", issues, cfg.reference_estimator);
  } else {
    issues.push_back("missing [study] table");
  }
  if (cfg.name.empty() && doc.tables.count("study")) issues.push_back("study.name is empty");
  if (cfg.setting != 1 && cfg.setting != 2) issues.push_back("study.setting must be 1 or 2");
  if (cfg.replications < 1) issues.push_back("study.replications must be >= 1");
  if (!(cfg.level > 0.0 && cfg.level < 1.0)) issues.push_back("study.level must lie in (0,1)");
  if (!(cfg.clamp > 0.0 && cfg.clamp < 0.5)) issues.push_back("study.clamp must lie in (0,0.5)");
  if (cfg.preliminary_n < 0) issues.push_back("study.preliminary_n must be >= 0");
  if (cfg.reference_estimator != "simple" && cfg.reference_estimator != "optimized")
    issues.push_back("study.reference_estimator must be simple or optimized");

  // [population]
  if (auto it = doc.tables.find("population"); it != doc.tables.end()) {
    const TomlTable& t = it->second;
    check_known_keys(t, "population", {"mean", "cov", "gamma0", "gamma1", "gamma2", "gamma3"},
                     issues);
    if (!get_vec(t, "population", "mean", issues, cfg.mean) && !find(t, "mean"))
      issues.push_back("population.mean is required");
    if (!get_mat(t, "population", "cov", issues, cfg.cov) && !find(t, "cov"))
      issues.push_back("population.cov is required");
    double dv = 0.0;
    if (get_number(t, "population", "gamma0", issues, dv))
      cfg.gamma0 = dv;
    else if (!find(t, "gamma0"))
      issues.push_back("population.gamma0 is required");
    if (const TomlValue* v = find(t, "gamma1")) {
      if (v->is_number()) {
        cfg.gamma1 = {v->as_number()};
      } else if (!number_array(*v, cfg.gamma1)) {
        issues.push_back("population.gamma1 must be a number or an array of numbers");
      }
      if (v->is_array() && cfg.gamma1.empty())
        issues.push_back("population.gamma1 must not be empty");
    } else {
      issues.push_back("population.gamma1 is required");
    }
    if (!get_vec(t, "population", "gamma2", issues, cfg.gamma2) && !find(t, "gamma2"))
      issues.push_back("population.gamma2 is required");
    if (!get_vec(t, "population", "gamma3", issues, cfg.gamma3) && !find(t, "gamma3"))
      issues.push_back("population.gamma3 is required");
  } else {
    issues.push_back("missing [population] table");
  }
  const int d = cfg.dim();
  if (d > 0) {
    if (cfg.cov.rows() != d || cfg.cov.cols() != d)
      issues.push_back("population.cov must be " + std::to_string(d) + "x" + std::to_string(d));
    if (cfg.gamma2.size() != d)
      issues.push_back("population.gamma2 must have length " + std::to_string(d));
    if (cfg.gamma3.size() != d)
      issues.push_back("population.gamma3 must have length " + std::to_string(d));
  }

  // [grid]
  if (auto it = doc.tables.find("grid"); it != doc.tables.end()) {
    const TomlTable& t = it->second;
    check_known_keys(t, "grid", {"x"}, issues);
    if (!get_string_array(t, "grid", "x", issues, cfg.x_labels) && !find(t, "x"))
      issues.push_back("grid.x is required");
  } else {
    issues.push_back("missing [grid] table");
  }
  if (cfg.x_labels.empty() && doc.tables.count("grid")) issues.push_back("grid.x is empty");
  {
    std::vector<std::string> seen;
    for (const auto& xl : cfg.x_labels) {
      if (std::find(seen.begin(), seen.end(), xl) != seen.end())
        issues.push_back("grid.x repeats '" + xl + "'");
      seen.push_back(xl);
      if (d > 0) parse_selector(xl, d, &issues);
    }
  }

  // [[design]]
  if (auto it = doc.table_arrays.find("design"); it != doc.table_arrays.end()) {
    int idx = 0;
    for (const TomlTable& t : it->second) {
      ++idx;
      DesignConfig dc;
      const std::string where = "design #" + std::to_string(idx);
      check_known_keys(t, where, {"name", "stage_sizes", "stage1", "adapt", "variance_model",
                                  "estimators"},
                       issues);
      if (!get_string(t, where, "name", issues, dc.name) && !find(t, "name"))
        issues.push_back(where + ": name is required");
      const std::string label = dc.name.empty() ? where : "design '" + dc.name + "'";
      if (const TomlValue* v = find(t, "stage_sizes")) {
        bool ok = v->is_array();
        if (ok)
          for (const auto& e : v->as_array())
            if (!e.is_int()) ok = false;
        if (!ok) {
          issues.push_back(label + ": stage_sizes must be an array of integers");
        } else {
          for (const auto& e : v->as_array()) dc.stage_sizes.push_back(static_cast<int>(e.as_int()));
        }
      } else {
        issues.push_back(label + ": stage_sizes is required");
      }
      for (int n : dc.stage_sizes)
        if (n < 2) issues.push_back(label + ": every stage size must be >= 2");
      get_string(t, where, "stage1", issues, dc.stage1);
      if (dc.stage1.rfind("cir:", 0) == 0) {
        const std::string rest = dc.stage1.substr(4);
        bool ok = true;
        double p = 0.0;
        try {
          std::size_t used = 0;
          p = std::stod(rest, &used);
          ok = used == rest.size();
        } catch (const std::exception&) {
          ok = false;
        }
        if (!ok || !(p > 0.0 && p < 1.0))
          issues.push_back(label + ": stage1 'cir:<p>' needs p in (0,1)");
      } else if (dc.stage1 != "optimized-cir" && dc.stage1 != "optimized-cdr") {
        issues.push_back(label + ": stage1 must be 'cir:<p>', 'optimized-cir', or 'optimized-cdr'");
      } else if (cfg.preliminary_n < 4) {
        issues.push_back(label + ": stage1 '" + dc.stage1 +
                         "' needs study.preliminary_n >= 4");
      }
      get_string(t, where, "adapt", issues, dc.adapt);
      if (dc.stages() >= 2) {
        if (dc.adapt.empty())
          issues.push_back(label + ": adapt is required for multi-stage designs");
        else if (dc.adapt != "cir" && dc.adapt != "cdr")
          issues.push_back(label + ": adapt must be cir or cdr");
      } else if (!dc.adapt.empty()) {
        issues.push_back(label + ": adapt is only meaningful with 2+ stages");
      }
      get_string(t, where, "variance_model", issues, dc.variance_model);
      if (dc.variance_model != "logistic" && dc.variance_model != "empirical")
        issues.push_back(label + ": variance_model must be logistic or empirical");
      if (find(t, "estimators")) {
        get_string_array(t, where, "estimators", issues, dc.estimators);
        if (dc.estimators.empty()) issues.push_back(label + ": estimators is empty");
        std::vector<std::string> seen;
        for (const auto& e : dc.estimators) {
          if (e != "simple" && e != "optimized")
            issues.push_back(label + ": estimator '" + e + "' must be simple or optimized");
          if (std::find(seen.begin(), seen.end(), e) != seen.end())
            issues.push_back(label + ": estimator '" + e + "' repeats");
          seen.push_back(e);
        }
      }
      cfg.designs.push_back(std::move(dc));
    }
  }
  if (cfg.designs.empty()) issues.push_back("at least one [[design]] is required");
  {
    std::vector<std::string> seen;
    for (const auto& dc : cfg.designs) {
      if (!dc.name.empty() && std::find(seen.begin(), seen.end(), dc.name) != seen.end())
        issues.push_back("duplicate design name '" + dc.name + "'");
      seen.push_back(dc.name);
    }
  }
  if (cfg.reference_design.empty() && !cfg.designs.empty())
    cfg.reference_design = cfg.designs.front().name;
  {
    const DesignConfig* ref = nullptr;
    for (const auto& dc : cfg.designs)
      if (dc.name == cfg.reference_design) ref = &dc;
    if (!ref) {
      if (!cfg.designs.empty())
        issues.push_back("reference_design '" + cfg.reference_design + "' is not a design name");
    } else if (std::find(ref->estimators.begin(), ref->estimators.end(),
                         cfg.reference_estimator) == ref->estimators.end()) {
      issues.push_back("reference design '" + cfg.reference_design + "' does not request the '" +
                       cfg.reference_estimator + "' estimator");
    }
  }
  // The cell-based variance model needs dichotomized selectors.
  for (const auto& dc : cfg.designs) {
    if (dc.variance_model != "empirical") continue;
    for (const auto& xl : cfg.x_labels) {
      auto sel = parse_selector(xl, d > 0 ? d : 1, nullptr);
      if (sel && !sel->discrete())
        issues.push_back("design '" + dc.name + "': empirical variance_model needs every grid.x "
                         "term dichotomized, but '" + xl + "' is continuous");
    }
  }

  if (!issues.empty()) throw ConfigError(std::move(issues));
  return cfg;
}

inline StudyConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError({"cannot open config file: " + path});
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Canonical form and hashing
// ---------------------------------------------------------------------------

inline std::string emit_normalized(const StudyConfig& cfg) {
  using study_detail::shortest_double;
  std::ostringstream os;
  auto num = [](double v) { return shortest_double(v); };
  auto vec = [&](const Vec& v) {
    std::string out = "[";
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (i) out += ", ";
      out += num(v(i));
    }
    return out + "]";
  };
  os << "[study]\n";
  os << "name = \"" << cfg.name << "\"\n";
  os << "setting = " << cfg.setting << "\n";
  os << "replications = " << cfg.replications << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "level = " << num(cfg.level) << "\n";
  os << "clamp = " << num(cfg.clamp) << "\n";
  os << "link = \"" << link_name(cfg.link) << "\"\n";
  os << "preliminary_n = " << cfg.preliminary_n << "\n";
  os << "reference_design = \"" << cfg.reference_design << "\"\n";
  os << "reference_estimator = \"" << cfg.reference_estimator << "\"\n";
  os << "\n[population]\n";
  os << "mean = " << vec(cfg.mean) << "\n";
  os << "cov = [";
  for (Eigen::Index i = 0; i < cfg.cov.rows(); ++i) {
    if (i) os << ", ";
    os << vec(cfg.cov.row(i).transpose());
  }
  os << "]\n";
  os << "gamma0 = " << num(cfg.gamma0) << "\n";
  os << "gamma1 = [";
  for (std::size_t i = 0; i < cfg.gamma1.size(); ++i) {
    if (i) os << ", ";
    os << num(cfg.gamma1[i]);
  }
  os << "]\n";
  os << "gamma2 = " << vec(cfg.gamma2) << "\n";
  os << "gamma3 = " << vec(cfg.gamma3) << "\n";
  os << "\n[grid]\n";
  os << "x = [";
  for (std::size_t i = 0; i < cfg.x_labels.size(); ++i) {
    if (i) os << ", ";
    os << '"' << cfg.x_labels[i] << '"';
  }
  os << "]\n";
  for (const auto& dc : cfg.designs) {
    os << "\n[[design]]\n";
    os << "name = \"" << dc.name << "\"\n";
    os << "stage_sizes = [";
    for (std::size_t i = 0; i < dc.stage_sizes.size(); ++i) {
      if (i) os << ", ";
      os << dc.stage_sizes[i];
    }
    os << "]\n";
    os << "stage1 = \"" << dc.stage1 << "\"\n";
    if (dc.stages() >= 2) os << "adapt = \"" << dc.adapt << "\"\n";
    os << "variance_model = \"" << dc.variance_model << "\"\n";
    os << "estimators = [";
    for (std::size_t i = 0; i < dc.estimators.size(); ++i) {
      if (i) os << ", ";
      os << '"' << dc.estimators[i] << '"';
    }
    os << "]\n";
  }
  return os.str();
}

inline std::string config_hash(const StudyConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(emit_normalized(cfg))));
  return buf;
}

// ---------------------------------------------------------------------------
// Grid expansion
// ---------------------------------------------------------------------------

namespace study_detail {

inline DesignSpec make_design(const DesignConfig& dc, const CovariateSelector& x, double clamp) {
  DesignSpec ds;
  ds.k = dc.stages();
  ds.stage_sizes = dc.stage_sizes;
  const VarianceModel vm =
      dc.variance_model == "empirical" ? VarianceModel::empirical : VarianceModel::logistic_working;
  if (dc.stage1.rfind("cir:", 0) == 0) {
    double p = std::strtod(dc.stage1.c_str() + 4, nullptr);
    ds.stage1 = AssignmentMechanism{FixedProbability{p}};
  } else {
    AdaptationRule r;
    r.design_class = dc.stage1 == "optimized-cdr" ? DesignClass::cdr : DesignClass::cir;
    r.selector = x;
    r.variance_model = vm;
    r.clamp = clamp;
    ds.stage1 = r;
  }
  if (ds.k >= 2) {
    AdaptationRule r;
    r.design_class = dc.adapt == "cdr" ? DesignClass::cdr : DesignClass::cir;
    r.selector = x;
    r.variance_model = vm;
    r.clamp = clamp;
    ds.adaptation = r;
  }
  return ds;
}

}  // namespace study_detail

inline std::vector<Scenario> expand_grid(const StudyConfig& cfg) {
  using namespace study_detail;
  std::vector<std::string> issues;
  std::vector<Scenario> out;
  for (double g1 : cfg.gamma1) {
    std::optional<PopulationSpec> pop;
    try {
      pop.emplace(cfg.mean, cfg.cov, cfg.gamma0, g1, cfg.gamma2, cfg.gamma3);
    } catch (const std::exception& e) {
      issues.push_back(std::string("population: ") + e.what());
      continue;
    }
    for (const auto& xl : cfg.x_labels) {
      auto sel = parse_selector(xl, cfg.dim(), &issues);
      if (!sel) continue;
      Scenario sc;
      sc.name = cfg.name + "-g" + file_tag(g1) + "-" + selector_tag(xl);
      sc.setting = cfg.setting;
      sc.population = *pop;
      sc.link = cfg.link;
      sc.x = *sel;
      sc.x_label = xl;
      sc.preliminary_n = cfg.preliminary_n;
      sc.replications = cfg.replications;
      sc.level = cfg.level;
      sc.seed = derive_stream(cfg.seed, fnv1a64(sc.name));
      sc.reference.design = cfg.reference_design;
      sc.reference.estimator = cfg.reference_estimator == "simple" ? EstimatorKind::simple
                                                                   : EstimatorKind::optimized;
      for (const auto& dc : cfg.designs) {
        DesignEntry de;
        de.name = dc.name;
        de.design = make_design(dc, *sel, cfg.clamp);
        for (const auto& e : dc.estimators)
          de.estimators.push_back(e == "simple" ? EstimatorKind::simple : EstimatorKind::optimized);
        sc.designs.push_back(std::move(de));
      }
      for (const auto& m : sc.validate()) issues.push_back(sc.name + ": " + m);
      out.push_back(std::move(sc));
    }
  }
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline const char* summary_csv_header() {
  return "scenario,setting,gamma1,design,estimator,x_selector,reps,failures,bias,emp_sd,"
         "median_se,rel_eff,coverage,mean_pi2";
}

namespace study_detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string stat(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::vector<std::string> summary_row(const ScenarioSummary& sum, const CellStats& cell) {
  return {sum.scenario,
          std::to_string(sum.setting),
          shortest_double(sum.gamma1),
          cell.design,
          estimator_name(cell.estimator),
          sum.x_label,
          std::to_string(cell.reps),
          std::to_string(cell.failures),
          stat(cell.bias),
          stat(cell.emp_sd),
          stat(cell.median_se),
          stat(cell.rel_eff),
          stat(cell.coverage),
          stat(cell.mean_p2)};
}

}  // namespace study_detail

inline void write_summary_csv(std::ostream& os, const std::vector<ScenarioSummary>& summaries) {
  os << summary_csv_header() << "\n";
  for (const auto& sum : summaries)
    for (const auto& cell : sum.cells) {
      auto row = study_detail::summary_row(sum, cell);
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) os << ',';
        os << study_detail::csv_field(row[i]);
      }
      os << "\n";
    }
}

inline void write_summary_table(std::ostream& os, const std::vector<ScenarioSummary>& summaries) {
  std::vector<std::string> header;
  {
    std::istringstream hs(summary_csv_header());
    std::string col;
    while (std::getline(hs, col, ',')) header.push_back(col);
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& sum : summaries)
    for (const auto& cell : sum.cells) rows.push_back(study_detail::summary_row(sum, cell));
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << "  ";
      os << row[i];
      if (i + 1 < row.size())
        for (std::size_t p = row[i].size(); p < width[i]; ++p) os << ' ';
    }
    os << "\n";
  };
  emit(header);
  {
    std::vector<std::string> dashes;
    for (std::size_t i = 0; i < header.size(); ++i) dashes.push_back(std::string(width[i], '-'));
    emit(dashes);
  }
  for (const auto& row : rows) emit(row);
}

/** Unique (gamma1, selector) cells of the grid, in config order. */
template <class Fn>
inline void for_each_truth_cell(const StudyConfig& cfg, Fn&& fn) {
  for (double g1 : cfg.gamma1) {
    PopulationSpec pop(cfg.mean, cfg.cov, cfg.gamma0, g1, cfg.gamma2, cfg.gamma3);
    for (const auto& xl : cfg.x_labels) {
      auto sel = parse_selector(xl, cfg.dim(), nullptr);
      if (!sel) continue;
      fn(g1, xl, pop, *sel);
    }
  }
}

inline void write_truth_table(std::ostream& os, const StudyConfig& cfg,
                              const TrueValueOptions& opts = {}) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"gamma1", "x_selector", "mu1", "mu0", "delta", "ev1_x", "ev0_x", "pi_opt_x",
                  "pi_opt_w", "method"});
  for_each_truth_cell(cfg, [&](double g1, const std::string& xl, const PopulationSpec& pop,
                               const CovariateSelector& sel) {
    TrueValues tv = true_marginals(pop, cfg.link, sel, opts);
    auto f = [](double v) { return study_detail::stat(v); };
    rows.push_back({study_detail::shortest_double(g1), xl, f(tv.mu1), f(tv.mu0), f(tv.delta),
                    f(tv.ev1_x), f(tv.ev0_x), f(tv.pi_opt_x), f(tv.pi_opt_w), tv.method});
  });
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      if (i) os << "  ";
      os << rows[r][i];
      if (i + 1 < rows[r].size())
        for (std::size_t p = rows[r][i].size(); p < width[i]; ++p) os << ' ';
    }
    os << "\n";
    if (r == 0) {
      for (std::size_t i = 0; i < width.size(); ++i) {
        if (i) os << "  ";
        os << std::string(width[i], '-');
      }
      os << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Study runner
// ---------------------------------------------------------------------------

struct RunOptions {
  int jobs = 1;
  std::string out_dir = "out";
  std::string format = "csv";  // csv | table
  std::optional<std::uint64_t> seed_override;
  std::optional<int> reps_override;
  std::ostream* log = nullptr;
};

struct StudyResult {
  std::vector<ScenarioSummary> summaries;
  std::string out_dir;
  int invalid_cells = 0;
  int exit_code = 0;
};

inline StudyResult run_study(StudyConfig cfg, const RunOptions& opt) {
  namespace fs = std::filesystem;
  if (opt.seed_override) cfg.seed = *opt.seed_override;
  if (opt.reps_override) cfg.replications = *opt.reps_override;
  auto scenarios = expand_grid(cfg);

  fs::create_directories(opt.out_dir);
  std::ofstream manifest(fs::path(opt.out_dir) / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot write to output directory " + opt.out_dir);

  const std::string hash = config_hash(cfg);
  {
    nlohmann::json j;
    j["event"] = "run_start";
    j["study"] = cfg.name;
    j["config_hash"] = hash;
    j["seed"] = cfg.seed;
    j["replications"] = cfg.replications;
    j["jobs"] = opt.jobs;
    j["scenarios"] = scenarios.size();
    manifest << j.dump() << "\n";
  }

  // Truth depends only on (effect size, selector); share it across scenarios.
  std::map<std::string, TrueValues> truth_cache;
  auto truth_key = [](double g1, const std::string& xl) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%a|", g1);
    return std::string(buf) + xl;
  };

  StudyResult result;
  result.out_dir = opt.out_dir;
  int i = 0;
  for (const auto& sc : scenarios) {
    ++i;
    auto t0 = std::chrono::steady_clock::now();
    if (opt.log)
      (*opt.log) << "[" << i << "/" << scenarios.size() << "] " << sc.name << ": "
                 << sc.replications << " replications" << std::endl;
    const std::string key = truth_key(sc.population.gamma1, sc.x_label);
    auto it = truth_cache.find(key);
    if (it == truth_cache.end())
      it = truth_cache.emplace(key, true_marginals(sc.population, sc.link, sc.x)).first;
    ScenarioSummary sum = monte_carlo(sc, opt.jobs, &it->second);
    {
      std::ofstream per(fs::path(opt.out_dir) / (sc.name + ".csv"), std::ios::binary);
      std::vector<ScenarioSummary> one{sum};
      write_summary_csv(per, one);
    }
    {
      nlohmann::json j;
      j["event"] = "scenario";
      j["name"] = sum.scenario;
      j["setting"] = sum.setting;
      j["gamma1"] = sum.gamma1;
      j["x"] = sum.x_label;
      j["seed"] = sum.seed;
      j["replications"] = sum.replications;
      j["truth"] = {{"mu1", sum.truth.mu1},         {"mu0", sum.truth.mu0},
                    {"delta", sum.truth.delta},     {"ev1_x", sum.truth.ev1_x},
                    {"ev0_x", sum.truth.ev0_x},     {"pi_opt_x", sum.truth.pi_opt_x},
                    {"pi_opt_w", sum.truth.pi_opt_w}, {"method", sum.truth.method}};
      j["warnings"] = sum.warnings;
      j["invalid"] = sum.invalid;
      manifest << j.dump() << "\n";
    }
    for (const auto& cell : sum.cells)
      if (cell.invalid) ++result.invalid_cells;
    if (opt.log) {
      auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.1f", secs);
      (*opt.log) << "    done in " << buf << " s, cells " << sum.cells.size() << ", warnings "
                 << sum.warnings << (sum.invalid ? ", INVALID" : "") << std::endl;
    }
    result.summaries.push_back(std::move(sum));
  }

  {
    std::ofstream all(fs::path(opt.out_dir) / "summary.csv", std::ios::binary);
    write_summary_csv(all, result.summaries);
  }
  result.exit_code = result.invalid_cells > 0 ? 2 : 0;
  {
    nlohmann::json j;
    j["event"] = "run_end";
    j["scenarios"] = scenarios.size();
    j["invalid_cells"] = result.invalid_cells;
    j["status"] = result.exit_code == 0 ? "ok" : "invalid";
    manifest << j.dump() << "\n";
  }
  return result;
}

}  // namespace adaptrial
