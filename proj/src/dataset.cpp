#include "crm/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "crm/core_math.hpp"
#include "crm/errors.hpp"

namespace crm {

namespace {

constexpr const char* kHeaderRow = "id\tsplit\tkind\tparent_id\tlabel\ttext_a\ttext_b";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

[[noreturn]] void fail_at(std::size_t line_no, const std::string& what) {
  throw DataError("dataset line " + std::to_string(line_no) + ": " + what);
}

std::size_t parse_index(const std::string& s, std::size_t line_no) {
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != end) fail_at(line_no, "bad label '" + s + "'");
  return v;
}

int split_rank(Split s) { return static_cast<int>(s); }

}  // namespace

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

const char* to_string(SampleKind k) { return k == SampleKind::Factual ? "factual" : "counterfactual"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + s + "'");
}

std::vector<const Sample*> Dataset::select(Split split, SampleKind kind) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples)
    if (s.split == split && s.kind == kind) out.push_back(&s);
  return out;
}

const Sample* Dataset::find(const std::string& id) const {
  for (const auto& s : samples)
    if (s.id == id) return &s;
  return nullptr;
}

std::string escape_field(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_field(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out += s[i];
      continue;
    }
    const char n = s[++i];
    switch (n) {
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case '\\': out += '\\'; break;
      default:
        out += '\\';
        out += n;
    }
  }
  return out;
}

std::string format_latent(std::span<const double> v) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ' ';
    const auto res = std::to_chars(buf, buf + sizeof buf, v[i]);
    out.append(buf, res.ptr);
  }
  return out;
}

Vector parse_latent(const std::string& text) {
  Vector out;
  const char* p = text.data();
  const char* end = p + text.size();
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t')) ++p;
    if (p == end) break;
    double v = 0.0;
    const auto res = std::from_chars(p, end, v);
    if (res.ec != std::errc{}) throw DataError("bad latent value near '" + std::string(p, end) + "'");
    if (!std::isfinite(v)) throw DataError("non-finite latent value");
    out.push_back(v);
    p = res.ptr;
    if (p < end && *p != ' ' && *p != '\t') throw DataError("bad latent separator");
  }
  return out;
}

Dataset parse_dataset(const std::string& contents) {
  Dataset ds;
  std::istringstream in(contents);
  std::string line;
  std::size_t line_no = 0;
  bool seen_header = false;
  bool task_given = false;
  std::vector<std::size_t> sample_lines;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!seen_header && line[0] == '#') {
      const auto f = split_tabs(line);
      const std::string& key = f[0];
      if (key == "#classes") {
        if (f.size() < 3) fail_at(line_no, "#classes needs at least two names");
        ds.class_names.assign(f.begin() + 1, f.end());
      } else if (key == "#task") {
        if (f.size() != 2 || (f[1] != "single" && f[1] != "pair")) fail_at(line_no, "#task must be single|pair");
        ds.task = f[1] == "pair" ? TaskKind::Pair : TaskKind::Single;
        task_given = true;
      } else if (key == "#input") {
        if (f.size() == 2 && f[1] == "text") {
          ds.input = InputKind::Text;
        } else if (f.size() == 3 && f[1] == "latent") {
          ds.input = InputKind::Latent;
          ds.latent_dim = parse_index(f[2], line_no);
          if (ds.latent_dim == 0) fail_at(line_no, "latent dimension must be positive");
        } else {
          fail_at(line_no, "#input must be 'text' or 'latent<TAB>D'");
        }
      }
      // Unknown '#' lines are comments.
      continue;
    }
    if (!seen_header) {
      if (line != kHeaderRow) fail_at(line_no, "expected header row '" + std::string(kHeaderRow) + "'");
      seen_header = true;
      continue;
    }
    const auto f = split_tabs(line);
    if (f.size() != 7) fail_at(line_no, "expected 7 tab-separated fields, got " + std::to_string(f.size()));
    Sample s;
    s.id = f[0];
    if (s.id.empty()) fail_at(line_no, "empty id");
    try {
      s.split = parse_split(f[1]);
    } catch (const DataError& e) {
      fail_at(line_no, e.what());
    }
    if (f[2] == "factual") {
      s.kind = SampleKind::Factual;
    } else if (f[2] == "counterfactual") {
      s.kind = SampleKind::Counterfactual;
    } else {
      fail_at(line_no, "unknown kind '" + f[2] + "'");
    }
    s.parent_id = f[3];
    s.label = parse_index(f[4], line_no);
    s.text_a = unescape_field(f[5]);
    s.text_b = unescape_field(f[6]);
    if (ds.input == InputKind::Latent) {
      try {
        s.latent = parse_latent(s.text_a);
      } catch (const DataError& e) {
        fail_at(line_no, e.what());
      }
      if (s.latent.size() != ds.latent_dim) {
        fail_at(line_no, "latent vector has " + std::to_string(s.latent.size()) + " entries, header says " +
                             std::to_string(ds.latent_dim));
      }
    }
    ds.samples.push_back(std::move(s));
    sample_lines.push_back(line_no);
  }
  if (!seen_header) throw DataError("dataset: missing header row");

  if (ds.class_names.empty()) {
    std::size_t max_label = 0;
    for (const auto& s : ds.samples) max_label = std::max(max_label, s.label);
    for (std::size_t c = 0; c <= std::max<std::size_t>(max_label, 1); ++c) ds.class_names.push_back(std::to_string(c));
  }
  if (!task_given) {
    for (const auto& s : ds.samples)
      if (!s.text_b.empty()) ds.task = TaskKind::Pair;
  }

  // Row-level checks need line numbers, so run them before sorting.
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (!index.emplace(ds.samples[i].id, i).second)
      fail_at(sample_lines[i], "duplicate id '" + ds.samples[i].id + "'");
  }
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    if (s.label >= ds.class_count())
      fail_at(sample_lines[i], "label " + std::to_string(s.label) + " outside [0, " +
                                   std::to_string(ds.class_count()) + ")");
    if (s.is_factual()) {
      if (!s.parent_id.empty()) fail_at(sample_lines[i], "factual sample has a parent_id");
      continue;
    }
    const auto it = index.find(s.parent_id);
    if (s.parent_id.empty() || it == index.end())
      fail_at(sample_lines[i], "counterfactual '" + s.id + "' has dangling parent '" + s.parent_id + "'");
    const Sample& parent = ds.samples[it->second];
    if (!parent.is_factual()) fail_at(sample_lines[i], "parent '" + parent.id + "' is not factual");
    if (parent.split != s.split) fail_at(sample_lines[i], "parent '" + parent.id + "' is in another split");
    if (parent.label == s.label)
      fail_at(sample_lines[i], "counterfactual '" + s.id + "' has the same label as its parent");
  }
  validate_and_sort(ds);
  return ds;
}

void validate_and_sort(Dataset& ds) {
  if (ds.class_count() < 2) throw DataError("dataset needs at least two classes");
  std::unordered_map<std::string, const Sample*> by_id;
  for (const auto& s : ds.samples) {
    if (!by_id.emplace(s.id, &s).second) throw DataError("duplicate id '" + s.id + "'");
    if (s.label >= ds.class_count()) throw DataError("label out of range for '" + s.id + "'");
    if (ds.input == InputKind::Latent && s.latent.size() != ds.latent_dim)
      throw DataError("latent dimension mismatch for '" + s.id + "'");
  }
  for (const auto& s : ds.samples) {
    if (s.is_factual()) {
      if (!s.parent_id.empty()) throw DataError("factual '" + s.id + "' has a parent_id");
      continue;
    }
    const auto it = by_id.find(s.parent_id);
    if (it == by_id.end() || !it->second->is_factual() || it->second->split != s.split)
      throw DataError("counterfactual '" + s.id + "' has dangling parent '" + s.parent_id + "'");
    if (it->second->label == s.label) throw DataError("counterfactual '" + s.id + "' keeps its parent's label");
  }
  std::vector<bool> in_train(ds.class_count(), false);
  for (const auto& s : ds.samples)
    if (s.split == Split::Train) in_train[s.label] = true;
  for (std::size_t c = 0; c < ds.class_count(); ++c)
    if (!in_train[c]) throw DataError("class " + std::to_string(c) + " never appears in the train split");

  std::stable_sort(ds.samples.begin(), ds.samples.end(), [](const Sample& a, const Sample& b) {
    if (a.split != b.split) return split_rank(a.split) < split_rank(b.split);
    return a.id < b.id;
  });
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str());
}

std::string serialize_dataset(const Dataset& ds) {
  std::ostringstream out;
  out << "#crm-dataset\t1\n#classes";
  for (const auto& n : ds.class_names) out << '\t' << n;
  out << "\n#task\t" << (ds.task == TaskKind::Pair ? "pair" : "single") << '\n';
  if (ds.input == InputKind::Latent) {
    out << "#input\tlatent\t" << ds.latent_dim << '\n';
  } else {
    out << "#input\ttext\n";
  }
  out << kHeaderRow << '\n';
  for (const auto& s : ds.samples) {
    const std::string text_a = ds.input == InputKind::Latent ? format_latent(s.latent) : escape_field(s.text_a);
    out << s.id << '\t' << to_string(s.split) << '\t' << to_string(s.kind) << '\t' << s.parent_id << '\t'
        << s.label << '\t' << text_a << '\t' << escape_field(s.text_b) << '\n';
  }
  return out.str();
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset '" + path + "'");
  out << serialize_dataset(ds);
}

Linkage link_pairs(const Dataset& ds) {
  Linkage link;
  for (const auto& s : ds.samples)
    if (s.is_factual()) link.by_factual[s.id];
  for (const auto& s : ds.samples) {
    if (s.is_factual()) continue;
    link.by_factual[s.parent_id].push_back({&s, s.label});
  }
  for (const auto& [id, cfs] : link.by_factual)
    if (cfs.empty()) ++link.unlinked_factuals;
  return link;
}

Vector reflect_across_bisector(std::span<const double> x, std::span<const double> a, std::span<const double> b) {
  const Vector n = normalized(sub(a, b));
  const double proj = dot(x, n);
  Vector out(x.begin(), x.end());
  axpy(out, n, -2.0 * proj);
  return out;
}

SynthResult synth_mirror_dataset(const SynthConfig& cfg) {
  if (cfg.classes < 2) throw DataError("synth: need at least two classes");
  if (cfg.dim < 2) throw DataError("synth: need at least two dimensions");
  if (cfg.n < cfg.classes) throw DataError("synth: need at least one sample per class");
  if (cfg.noise < 0.0 || cfg.base_spread < 0.0) throw DataError("synth: spreads must be non-negative");
  if (cfg.val_fraction < 0.0 || cfg.test_fraction < 0.0 || cfg.val_fraction + cfg.test_fraction >= 1.0)
    throw DataError("synth: split fractions must leave a training split");

  Rng rng(cfg.seed);
  SynthResult out;
  const std::size_t C = cfg.classes;
  const std::size_t D = cfg.dim;

  // Orthonormal class means when they fit, random unit vectors otherwise.
  out.class_means = Matrix(C, D);
  for (std::size_t c = 0; c < C; ++c) {
    while (true) {
      Vector v(D);
      fill_normal(v, rng, 1.0);
      if (c < D) {
        for (std::size_t p = 0; p < c; ++p) axpy(v, out.class_means.row(p), -dot(v, out.class_means.row(p)));
      }
      if (norm(v) < 1e-6) continue;
      const Vector u = normalized(v);
      std::copy(u.begin(), u.end(), out.class_means.row(c).begin());
      break;
    }
  }

  std::vector<std::size_t> order(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) order[i] = i;
  rng.shuffle(order);
  const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(cfg.n)));
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(cfg.n)));
  std::vector<Split> split_of(cfg.n, Split::Train);
  for (std::size_t k = 0; k < cfg.n; ++k) {
    if (k < n_test) {
      split_of[order[k]] = Split::Test;
    } else if (k < n_test + n_val) {
      split_of[order[k]] = Split::Val;
    }
  }

  Dataset& ds = out.dataset;
  ds.input = InputKind::Latent;
  ds.latent_dim = D;
  ds.task = TaskKind::Single;
  for (std::size_t c = 0; c < C; ++c) ds.class_names.push_back("class" + std::to_string(c));

  const double spread = (cfg.base_spread + cfg.noise) / std::sqrt(static_cast<double>(D));
  char id_buf[32];
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const std::size_t y = i % C;
    Vector x(out.class_means.row(y).begin(), out.class_means.row(y).end());
    for (auto& v : x) v += spread * rng.normal();
    x = normalized(x);

    std::snprintf(id_buf, sizeof id_buf, "f%06zu", i);
    Sample f;
    f.id = id_buf;
    f.split = split_of[i];
    f.kind = SampleKind::Factual;
    f.label = y;
    f.latent = x;
    f.text_a = format_latent(x);
    for (std::size_t c = 0; c < C; ++c) {
      if (c == y) continue;
      const Vector mirror = reflect_across_bisector(x, out.class_means.row(y), out.class_means.row(c));
      Sample cf;
      cf.id = f.id + "_c" + std::to_string(c);
      cf.split = f.split;
      cf.kind = SampleKind::Counterfactual;
      cf.parent_id = f.id;
      cf.label = c;
      cf.latent = mirror;
      cf.text_a = format_latent(mirror);
      MirrorOracle o;
      o.factual_id = f.id;
      o.target_class = c;
      // Projection onto the bisector hyperplane, computed independently of the reflection.
      const Vector axis = normalized(sub(out.class_means.row(y), out.class_means.row(c)));
      o.midpoint = x;
      axpy(o.midpoint, axis, -dot(x, axis));
      o.mirror = mirror;
      out.oracle.emplace(cf.id, std::move(o));
      ds.samples.push_back(std::move(cf));
    }
    ds.samples.push_back(std::move(f));
  }
  validate_and_sort(ds);
  return out;
}

}  // namespace crm
