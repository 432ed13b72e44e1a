#include "krff/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "json_util.hpp"
#include "krff/trajectory_io.hpp"

namespace krff {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// names

namespace {

template <class E>
struct NameTable {
  std::vector<std::pair<E, std::string>> entries;

  const std::string& name(E e) const {
    for (const auto& [k, v] : entries)
      if (k == e) return v;
    throw std::logic_error("unnamed enum value");
  }
  std::optional<E> find(const std::string& s) const {
    for (const auto& [k, v] : entries)
      if (v == s) return k;
    return std::nullopt;
  }
  std::string choices() const {
    std::string out;
    for (const auto& [k, v] : entries) out += (out.empty() ? "" : ", ") + v;
    return out;
  }
};

const NameTable<DictionaryKind> kDictNames{{{DictionaryKind::Rff, "rff"},
                                            {DictionaryKind::Gaussian, "gaussian"},
                                            {DictionaryKind::Monomial, "monomial"},
                                            {DictionaryKind::Kernel, "kernel"}}};
const NameTable<Sampling> kSamplingNames{{{Sampling::Lattice, "lattice"},
                                          {Sampling::Uniform, "uniform"}}};
const NameTable<BaselineFit> kBaselineNames{{{BaselineFit::PerPair, "per_pair"},
                                             {BaselineFit::Global, "global"}}};
const NameTable<TruthSpan> kTruthNames{{{TruthSpan::Dataset, "dataset"},
                                        {TruthSpan::Extended, "extended"}}};
const NameTable<SolverKind> kSolverNames{{{SolverKind::Rk45, "rk45"}, {SolverKind::Abm4, "abm4"}}};
const NameTable<KMode> kKModeNames{{{KMode::ClosedForm, "closed_form"}, {KMode::FreeVariable, "free"}}};
const NameTable<Optimizer> kOptimizerNames{{{Optimizer::Sgd, "sgd"},
                                            {Optimizer::Momentum, "momentum"},
                                            {Optimizer::Adam, "adam"}}};

}  // namespace

std::string dictionary_label(DictionaryKind k) {
  switch (k) {
    case DictionaryKind::Rff: return "learned";
    case DictionaryKind::Gaussian: return "gaussian";
    case DictionaryKind::Monomial: return "monomial";
    case DictionaryKind::Kernel: return "kernel";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// comments and key positions

std::string strip_json_comments(const std::string& text) {
  std::string out = text;
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    const char c = text[i];
    if (c == '"') {
      ++i;
      while (i < n && text[i] != '"') i += text[i] == '\\' ? 2 : 1;
      ++i;
    } else if (c == '/' && i + 1 < n && text[i + 1] == '/') {
      while (i < n && text[i] != '\n') out[i++] = ' ';
    } else if (c == '/' && i + 1 < n && text[i + 1] == '*') {
      std::size_t j = i;
      const std::size_t end = text.find("*/", i + 2);
      const std::size_t stop = end == std::string::npos ? n : end + 2;
      for (; j < stop; ++j)
        if (out[j] != '\n') out[j] = ' ';
      i = stop;
    } else {
      ++i;
    }
  }
  return out;
}

namespace {

// Maps dotted key paths ("train.epochs", "eval.field_grid") to 1-based
// source lines by scanning the comment-free text.
class KeyLines {
 public:
  explicit KeyLines(const std::string& text) {
    struct Frame {
      bool object;
      std::string path;
      std::string key;
      int index = 0;
    };
    std::vector<Frame> stack;
    int line = 1;
    auto child = [&]() -> std::string {
      if (stack.empty()) return "";
      const Frame& f = stack.back();
      if (f.object) return f.path.empty() ? f.key : f.path + "." + f.key;
      return f.path + "[" + std::to_string(f.index) + "]";
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
      const char c = text[i];
      if (c == '\n') {
        ++line;
      } else if (c == '{' || c == '[') {
        stack.push_back({c == '{', child(), "", 0});
      } else if (c == '}' || c == ']') {
        if (!stack.empty()) stack.pop_back();
      } else if (c == ',') {
        if (!stack.empty() && !stack.back().object) ++stack.back().index;
      } else if (c == '"') {
        const int start_line = line;
        std::string s;
        ++i;
        while (i < text.size() && text[i] != '"') {
          if (text[i] == '\\' && i + 1 < text.size()) {
            s += text[i + 1];
            i += 2;
            continue;
          }
          if (text[i] == '\n') ++line;
          s += text[i++];
        }
        std::size_t j = i + 1;
        while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j < text.size() && text[j] == ':' && !stack.empty() && stack.back().object) {
          stack.back().key = s;
          const std::string p = stack.back().path.empty() ? s : stack.back().path + "." + s;
          lines_.emplace(p, start_line);
        }
      }
    }
  }

  // Line of the path, or of its closest located ancestor; 0 if none.
  int find(std::string path) const {
    while (true) {
      if (auto it = lines_.find(path); it != lines_.end()) return it->second;
      const std::size_t cut = path.find_last_of(".[");
      if (cut == std::string::npos) return 0;
      path.resize(cut);
    }
  }

 private:
  std::map<std::string, int> lines_;
};

struct Ctx {
  const KeyLines* lines = nullptr;
  std::string source;

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    const int line = lines ? lines->find(path) : 0;
    std::string where = source;
    if (line > 0) where += ":" + std::to_string(line);
    throw ConfigError(where + ": " + msg);
  }
};

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

// Typed access to one JSON object; keys that were never asked for are
// reported by done().
class Obj {
 public:
  Obj(const Ctx& ctx, const json& j, std::string path) : ctx_(ctx), j_(j), path_(std::move(path)) {
    if (!j.is_object())
      ctx_.fail(path_, "'" + (path_.empty() ? std::string("config") : path_) +
                           "' must be an object");
  }

  bool has(const std::string& key) {
    known_.insert(key);
    return j_.contains(key);
  }

  const json& at(const std::string& key) { return j_.at(key); }
  std::string path(const std::string& key) const { return join(path_, key); }
  const Ctx& ctx() const { return ctx_; }

  double num(const std::string& key, double def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number()) fail(key, "must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(key, "must be finite");
    return d;
  }

  long long integer(const std::string& key, long long def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (v.is_number_integer()) return v.get<long long>();
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (std::isfinite(d) && d == std::floor(d) && std::abs(d) < 9e15)
        return static_cast<long long>(d);
    }
    fail(key, "must be an integer");
  }

  std::uint64_t u64(const std::string& key, std::uint64_t def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned()) fail(key, "must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  std::string str(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_string()) fail(key, "must be a string");
    return v.get<std::string>();
  }

  template <class E>
  E choice(const std::string& key, E def, const NameTable<E>& table) {
    if (!has(key)) return def;
    const std::string s = str(key, "");
    if (auto e = table.find(s)) return *e;
    fail(key, "unknown value '" + s + "' (expected one of: " + table.choices() + ")");
  }

  std::vector<int> ints(const std::string& key, const std::vector<int>& def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_array()) fail(key, "must be an array of integers");
    std::vector<int> out;
    for (const auto& e : v) {
      if (!e.is_number_integer()) fail(key, "must be an array of integers");
      out.push_back(e.get<int>());
    }
    return out;
  }

  Vec vec(const std::string& key) {
    if (!has(key)) return Vec();
    const json& v = j_.at(key);
    if (!v.is_array()) fail(key, "must be an array of numbers");
    Vec out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) fail(key, "must be an array of numbers");
      out[static_cast<Eigen::Index>(i)] = v[i].get<double>();
    }
    return out;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    ctx_.fail(join(path_, key), "'" + join(path_, key) + "' " + msg);
  }

  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (known_.count(it.key())) continue;
      std::string expected;
      for (const auto& k : known_) expected += (expected.empty() ? "" : ", ") + k;
      ctx_.fail(join(path_, it.key()),
                "unknown key '" + it.key() + "' in " +
                    (path_.empty() ? std::string("config") : "'" + path_ + "'") +
                    " (expected one of: " + expected + ")");
    }
  }

 private:
  const Ctx& ctx_;
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

// Member tables for the parameter structs, in declaration order.
template <class P>
std::vector<std::pair<std::string, double P::*>> param_fields();

template <>
std::vector<std::pair<std::string, double DuffingParams::*>> param_fields<DuffingParams>() {
  return {{"delta", &DuffingParams::delta},
          {"beta", &DuffingParams::beta},
          {"alpha", &DuffingParams::alpha}};
}

template <>
std::vector<std::pair<std::string, double DoubleGyreParams::*>> param_fields<DoubleGyreParams>() {
  return {{"epsilon", &DoubleGyreParams::epsilon},
          {"alpha", &DoubleGyreParams::alpha},
          {"amplitude", &DoubleGyreParams::amplitude},
          {"omega", &DoubleGyreParams::omega}};
}

template <>
std::vector<std::pair<std::string, double BickleyParams::*>> param_fields<BickleyParams>() {
  return {{"U0", &BickleyParams::U0},     {"L0", &BickleyParams::L0},
          {"c1", &BickleyParams::c1},     {"c2", &BickleyParams::c2},
          {"c3", &BickleyParams::c3},     {"eps1", &BickleyParams::eps1},
          {"eps2", &BickleyParams::eps2}, {"eps3", &BickleyParams::eps3},
          {"r0", &BickleyParams::r0},     {"k1", &BickleyParams::k1},
          {"k2", &BickleyParams::k2},     {"k3", &BickleyParams::k3}};
}

json params_json(const SystemParams& params) {
  return std::visit(
      [](const auto& p) {
        json j = json::object();
        for (const auto& [name, member] : param_fields<std::decay_t<decltype(p)>>())
          j[name] = p.*member;
        return j;
      },
      params);
}

SystemParams read_params(Obj& parent, SystemKind kind) {
  SystemParams params = default_params(kind);
  if (!parent.has("params")) return params;
  Obj o(parent.ctx(), parent.at("params"), parent.path("params"));
  std::visit(
      [&](auto& p) {
        for (const auto& [name, member] : param_fields<std::decay_t<decltype(p)>>())
          p.*member = o.num(name, p.*member);
      },
      params);
  o.done();
  return params;
}

ExperimentConfig config_from_json(const json& root, const Ctx& ctx) {
  ExperimentConfig c;
  Obj top(ctx, root, "");
  c.name = top.str("name", "");
  if (!top.has("system")) ctx.fail("", "missing required key 'system'");
  {
    const std::string sys = top.str("system", "");
    try {
      c.system = parse_system(sys);
    } catch (const std::exception&) {
      top.fail("system", "unknown system '" + sys + "' (expected one of: duffing, double_gyre, bickley)");
    }
  }
  c.params = read_params(top, c.system);
  c.seed = top.u64("seed", 0);
  c.output_dir = top.str("output_dir", c.output_dir);

  if (top.has("initial")) {
    Obj o(ctx, top.at("initial"), "initial");
    c.sampling = o.choice("sampling", c.sampling, kSamplingNames);
    c.particles = static_cast<int>(o.integer("particles", 0));
    c.counts = o.ints("counts", {});
    if (o.has("domain")) {
      Obj d(ctx, o.at("domain"), "initial.domain");
      c.domain_lo = d.vec("lo");
      c.domain_hi = d.vec("hi");
      d.done();
    }
    o.done();
  }

  if (top.has("time")) {
    Obj o(ctx, top.at("time"), "time");
    c.t0 = o.num("t0", c.t0);
    c.t1 = o.num("t1", c.t1);
    c.step = o.num("step", c.step);
    c.solver = o.choice("solver", c.solver, kSolverNames);
    o.done();
  }

  if (top.has("dictionary")) {
    Obj o(ctx, top.at("dictionary"), "dictionary");
    auto& d = c.dictionary;
    d.kind = o.choice("type", d.kind, kDictNames);
    switch (d.kind) {
      case DictionaryKind::Rff:
        d.features = static_cast<int>(o.integer("features", d.features));
        d.bandwidth = o.num("bandwidth", d.bandwidth);
        break;
      case DictionaryKind::Gaussian:
        d.counts = o.ints("counts", d.counts);
        d.sigma = o.num("sigma", d.sigma);
        break;
      case DictionaryKind::Monomial:
        d.degree = static_cast<int>(o.integer("degree", d.degree));
        break;
      case DictionaryKind::Kernel:
        d.sigma = o.num("sigma", d.sigma);
        d.regularization = o.num("regularization", d.regularization);
        d.samples = static_cast<int>(o.integer("samples", d.samples));
        break;
    }
    o.done();
  }

  if (top.has("train")) {
    Obj o(ctx, top.at("train"), "train");
    auto& t = c.train;
    t.lambda1 = o.num("lambda1", t.lambda1);
    t.lambda2 = o.num("lambda2", t.lambda2);
    t.step_size = o.num("step_size", t.step_size);
    t.epochs = static_cast<int>(o.integer("epochs", t.epochs));
    t.minibatch_particles = static_cast<int>(o.integer("minibatch_particles", t.minibatch_particles));
    if (o.has("ridge") && !o.at("ridge").is_null()) t.ridge = o.num("ridge", 0.0);
    t.refit_interval = static_cast<int>(o.integer("refit_interval", t.refit_interval));
    t.k_mode = o.choice("k_mode", t.k_mode, kKModeNames);
    t.optimizer = o.choice("optimizer", t.optimizer, kOptimizerNames);
    t.momentum = o.num("momentum", t.momentum);
    t.theta_steps_per_ingest =
        static_cast<int>(o.integer("theta_steps_per_ingest", t.theta_steps_per_ingest));
    t.replay_window = static_cast<int>(o.integer("replay_window", t.replay_window));
    t.forgetting = o.num("forgetting", t.forgetting);
    c.online = o.str("mode", "batch") == "online";
    if (o.has("mode") && o.str("mode", "") != "batch" && o.str("mode", "") != "online")
      o.fail("mode", "unknown value '" + o.str("mode", "") + "' (expected one of: batch, online)");
    c.checkpoint_interval = static_cast<int>(o.integer("checkpoint_interval", 0));
    o.done();
  }

  if (top.has("eval")) {
    Obj o(ctx, top.at("eval"), "eval");
    auto& e = c.eval;
    e.nt = static_cast<int>(o.integer("nt", e.nt));
    e.lt = static_cast<int>(o.integer("lt", e.lt));
    e.start_stride = static_cast<int>(o.integer("start_stride", e.start_stride));
    e.eigen_samples = static_cast<int>(o.integer("eigen_samples", e.eigen_samples));
    e.eigen_dt = o.num("eigen_dt", e.eigen_dt);
    e.top_j = static_cast<int>(o.integer("top_j", e.top_j));
    e.field_grid = o.ints("field_grid", e.field_grid);
    e.baseline_fit = o.choice("baseline_fit", e.baseline_fit, kBaselineNames);
    e.truth = o.choice("truth", e.truth, kTruthNames);
    o.done();
  }
  top.done();

  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const UsageError& e) {
    // validate() messages start with the offending dotted path.
    const std::string msg = e.what();
    ctx.fail(msg.substr(0, msg.find(':')), msg);
  }
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

std::pair<Vec, Vec> ExperimentConfig::domain() const {
  if (domain_lo.size() > 0) return {domain_lo, domain_hi};
  return default_domain(system);
}

std::vector<int> ExperimentConfig::lattice() const {
  if (!counts.empty()) return counts;
  const auto [lo, hi] = domain();
  return lattice_counts(lo, hi, particles);
}

int ExperimentConfig::particle_count() const {
  if (sampling == Sampling::Uniform) return particles;
  long long n = 1;
  for (int c : lattice()) n *= c;
  return static_cast<int>(n);
}

void ExperimentConfig::validate() const {
  const auto [dlo, dhi] = default_domain(system);
  const Eigen::Index d = dlo.size();
  require(params_finite(params), "params: parameters must be finite");
  require(kind_of(params) == system, "params: parameters do not belong to the system");
  require(domain_lo.size() == domain_hi.size(),
          "initial.domain: lo and hi must both be given with equal length");
  if (domain_lo.size() > 0) {
    require(domain_lo.size() == d, "initial.domain: expected " + std::to_string(d) + " coordinates");
    require((domain_hi.array() > domain_lo.array()).all(), "initial.domain: hi must exceed lo");
  }
  require(particles >= 0, "initial.particles: must be >= 0");
  if (sampling == Sampling::Uniform) {
    require(particles > 0, "initial.particles: uniform sampling needs particles > 0");
    require(counts.empty(), "initial.counts: not used with uniform sampling");
  } else {
    require(particles > 0 || !counts.empty(), "initial: give particles or counts");
    if (!counts.empty()) {
      require(static_cast<Eigen::Index>(counts.size()) == d,
              "initial.counts: expected " + std::to_string(d) + " entries");
      long long n = 1;
      for (int c : counts) {
        require(c >= 1, "initial.counts: entries must be >= 1");
        n *= c;
      }
      require(particles == 0 || n == particles,
              "initial.particles: does not match the product of counts (" + std::to_string(n) + ")");
    }
  }
  require(t1 > t0, "time.t1: must exceed t0");
  require(step > 0.0, "time.step: must be > 0");
  try {
    (void)time_grid(t0, t1, step);
  } catch (const std::exception& e) {
    throw UsageError(std::string("time.step: ") + e.what());
  }

  const auto& dict = dictionary;
  switch (dict.kind) {
    case DictionaryKind::Rff:
      require(dict.features >= 1, "dictionary.features: must be >= 1");
      require(dict.bandwidth > 0.0, "dictionary.bandwidth: must be > 0");
      break;
    case DictionaryKind::Gaussian:
      require(static_cast<Eigen::Index>(dict.counts.size()) == d,
              "dictionary.counts: expected " + std::to_string(d) + " entries");
      for (int c : dict.counts) require(c >= 1, "dictionary.counts: entries must be >= 1");
      require(dict.sigma > 0.0, "dictionary.sigma: must be > 0");
      break;
    case DictionaryKind::Monomial:
      require(dict.degree >= 0, "dictionary.degree: must be >= 0");
      break;
    case DictionaryKind::Kernel:
      require(dict.sigma > 0.0, "dictionary.sigma: must be > 0");
      require(dict.regularization >= 0.0, "dictionary.regularization: must be >= 0");
      require(dict.samples >= 2, "dictionary.samples: must be >= 2");
      break;
  }
  try {
    train.validate();
  } catch (const UsageError& e) {
    // "train: lambda1 must be >= 0" -> "train.lambda1: must be >= 0"
    std::string msg = e.what();
    const std::string head = "train: ";
    if (msg.rfind(head, 0) == 0) {
      const std::string rest = msg.substr(head.size());
      const std::size_t sp = rest.find(' ');
      msg = "train." + rest.substr(0, sp) + ":" + rest.substr(sp);
    }
    throw UsageError(msg);
  }
  require(checkpoint_interval >= 0, "train.checkpoint_interval: must be >= 0");
  require(eval.nt >= 1, "eval.nt: must be >= 1");
  require(eval.lt >= 1, "eval.lt: must be >= 1");
  require(eval.start_stride >= 1, "eval.start_stride: must be >= 1");
  require(eval.eigen_samples >= 1, "eval.eigen_samples: must be >= 1");
  require(eval.eigen_dt >= 0.0, "eval.eigen_dt: must be >= 0");
  require(eval.top_j >= 1, "eval.top_j: must be >= 1");
  require(static_cast<Eigen::Index>(eval.field_grid.size()) == d,
          "eval.field_grid: expected " + std::to_string(d) + " entries");
  for (int c : eval.field_grid) require(c >= 1, "eval.field_grid: entries must be >= 1");
  require(!output_dir.empty(), "output_dir: must not be empty");
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  const std::string clean = strip_json_comments(text);
  json root;
  try {
    root = json::parse(clean);
  } catch (const json::parse_error& e) {
    int line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < clean.size(); ++i) {
      if (clean[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::string what = e.what();
    if (const auto p = what.find("parse error"); p != std::string::npos) what = what.substr(p);
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) +
                      ": invalid JSON: " + what);
  }
  const KeyLines lines(clean);
  const Ctx ctx{&lines, source};
  return config_from_json(root, ctx);
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot read config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["system"] = system_name(c.system);
  j["params"] = params_json(c.params);
  json init = {{"sampling", kSamplingNames.name(c.sampling)},
               {"particles", c.particles},
               {"counts", c.counts}};
  if (c.domain_lo.size() > 0)
    init["domain"] = {{"lo", detail::vec_list(c.domain_lo)}, {"hi", detail::vec_list(c.domain_hi)}};
  j["initial"] = init;
  j["time"] = {{"t0", c.t0}, {"t1", c.t1}, {"step", c.step}, {"solver", kSolverNames.name(c.solver)}};
  const auto& d = c.dictionary;
  json dict = {{"type", kDictNames.name(d.kind)}};
  switch (d.kind) {
    case DictionaryKind::Rff:
      dict["features"] = d.features;
      dict["bandwidth"] = d.bandwidth;
      break;
    case DictionaryKind::Gaussian:
      dict["counts"] = d.counts;
      dict["sigma"] = d.sigma;
      break;
    case DictionaryKind::Monomial:
      dict["degree"] = d.degree;
      break;
    case DictionaryKind::Kernel:
      dict["sigma"] = d.sigma;
      dict["regularization"] = d.regularization;
      dict["samples"] = d.samples;
      break;
  }
  j["dictionary"] = dict;
  const auto& t = c.train;
  j["train"] = {{"mode", c.online ? "online" : "batch"},
                {"lambda1", t.lambda1},
                {"lambda2", t.lambda2},
                {"step_size", t.step_size},
                {"epochs", t.epochs},
                {"minibatch_particles", t.minibatch_particles},
                {"ridge", t.ridge ? json(*t.ridge) : json(nullptr)},
                {"refit_interval", t.refit_interval},
                {"k_mode", kKModeNames.name(t.k_mode)},
                {"optimizer", kOptimizerNames.name(t.optimizer)},
                {"momentum", t.momentum},
                {"theta_steps_per_ingest", t.theta_steps_per_ingest},
                {"replay_window", t.replay_window},
                {"forgetting", t.forgetting},
                {"checkpoint_interval", c.checkpoint_interval}};
  const auto& e = c.eval;
  j["eval"] = {{"nt", e.nt},
               {"lt", e.lt},
               {"start_stride", e.start_stride},
               {"eigen_samples", e.eigen_samples},
               {"eigen_dt", e.eigen_dt},
               {"top_j", e.top_j},
               {"field_grid", e.field_grid},
               {"baseline_fit", kBaselineNames.name(e.baseline_fit)},
               {"truth", kTruthNames.name(e.truth)}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  return j;
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& o, std::ostream* notes) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.output_dir) cfg.output_dir = *o.output_dir;
  if (o.particles) {
    require(*o.particles >= 1, "--particles must be >= 1");
    cfg.particles = *o.particles;
    cfg.counts.clear();
  }
  if (o.rff) {
    require(*o.rff >= 1, "--rff must be >= 1");
    if (cfg.dictionary.kind == DictionaryKind::Rff)
      cfg.dictionary.features = *o.rff;
    else if (notes)
      *notes << "note: --rff ignored for a " << kDictNames.name(cfg.dictionary.kind)
             << " dictionary\n";
  }
  if (o.epochs) {
    require(*o.epochs >= 0, "--epochs must be >= 0");
    cfg.train.epochs = *o.epochs;
  }
  cfg.validate();
}

// ---------------------------------------------------------------------------
// data

namespace {

int window_steps(const ExperimentConfig& cfg) {
  return static_cast<int>(time_grid(cfg.t0, cfg.t1, cfg.step).size()) - 1;
}

int truth_steps(const ExperimentConfig& cfg) {
  const int n = window_steps(cfg);
  if (cfg.eval.truth == TruthSpan::Dataset || cfg.dictionary.kind == DictionaryKind::Kernel)
    return n;
  return n + std::max(cfg.eval.nt, cfg.eval.lt);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t kUniformSalt = 0x5eed0001ull;
constexpr std::uint64_t kEigenSalt = 0x5eed0002ull;
constexpr std::uint64_t kKernelSalt = 0x5eed0003ull;

}  // namespace

Mat initial_positions(const ExperimentConfig& cfg) {
  const auto [lo, hi] = cfg.domain();
  if (cfg.sampling == Sampling::Uniform)
    return sample_uniform(lo, hi, cfg.particles, cfg.seed ^ kUniformSalt);
  return sample_grid(lo, hi, cfg.lattice());
}

std::string dataset_key(const ExperimentConfig& cfg) {
  const auto [lo, hi] = cfg.domain();
  json j = {{"system", system_name(cfg.system)},
            {"params", params_json(cfg.params)},
            {"sampling", kSamplingNames.name(cfg.sampling)},
            {"lo", detail::vec_list(lo)},
            {"hi", detail::vec_list(hi)},
            {"t0", cfg.t0},
            {"step", cfg.step},
            {"steps", truth_steps(cfg)},
            {"solver", kSolverNames.name(cfg.solver)},
            {"format", kTrajectoryFormatVersion}};
  if (cfg.sampling == Sampling::Uniform) {
    j["particles"] = cfg.particles;
    j["seed"] = cfg.seed;
  } else {
    j["counts"] = cfg.lattice();
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return os.str();
}

std::optional<fs::path> cache_dir_from_env() {
  const char* v = std::getenv("KOOPMAN_CACHE_DIR");
  if (!v || !*v) return std::nullopt;
  return fs::path(v);
}

ParticleEnsemble load_or_simulate(const ExperimentConfig& cfg,
                                  const std::optional<fs::path>& cache_dir, std::ostream* log) {
  const int steps = truth_steps(cfg);
  const int n = cfg.particle_count();
  fs::path file;
  if (cache_dir) {
    file = *cache_dir / (dataset_key(cfg) + ".krfftrj");
    if (fs::exists(file)) {
      try {
        ParticleEnsemble ens = load_ensemble(file);
        if (static_cast<int>(ens.states.size()) == steps + 1 && !ens.states.empty() &&
            ens.states.front().rows() == n) {
          if (log) *log << "dataset: cache hit " << file.string() << "\n";
          return ens;
        }
        if (log) *log << "dataset: cache entry has the wrong shape, regenerating\n";
      } catch (const std::exception& e) {
        if (log) *log << "dataset: unreadable cache entry (" << e.what() << "), regenerating\n";
      }
    }
  }
  SimulationSpec spec;
  spec.params = cfg.params;
  spec.initial = initial_positions(cfg);
  spec.t0 = cfg.t0;
  spec.t1 = cfg.t0 + steps * cfg.step;
  spec.step = cfg.step;
  spec.solver = cfg.solver;
  if (log) *log << "dataset: integrating " << n << " particles over " << steps << " steps\n";
  ParticleEnsemble ens = simulate(spec);
  if (cache_dir) {
    fs::create_directories(*cache_dir);
    const fs::path tmp = file.string() + ".tmp" + std::to_string(std::random_device{}());
    save_ensemble(tmp, ens);
    fs::rename(tmp, file);
    std::ofstream(file.string() + ".json") << std::setw(2) << to_json(cfg)["initial"] << "\n";
  }
  return ens;
}

SnapshotDataset training_window(const ExperimentConfig& cfg, const ParticleEnsemble& ens) {
  const int n = window_steps(cfg);
  require(static_cast<int>(ens.states.size()) >= n + 1,
          "training_window: ensemble shorter than the configured time span");
  ParticleEnsemble w;
  w.times = ens.times.head(n + 1);
  w.states.assign(ens.states.begin(), ens.states.begin() + n + 1);
  return make_snapshots(w);
}

// ---------------------------------------------------------------------------
// execution

TableRow ExperimentResult::row(const ExperimentConfig& cfg) const {
  require(nt_lt.has_value(), "results: this run has no NT/LT evaluation");
  return {system_name(cfg.system), dictionary_label(kind), nt_lt->nt.e_p, nt_lt->lt.e_p, ""};
}

namespace {

Dictionary fixed_dictionary(const ExperimentConfig& cfg) {
  const auto [lo, hi] = cfg.domain();
  if (cfg.dictionary.kind == DictionaryKind::Gaussian)
    return gaussian_grid(lo, hi, cfg.dictionary.counts, cfg.dictionary.sigma);
  return Monomial{cfg.dictionary.degree, static_cast<int>(lo.size())};
}

// Column j of the eigenfunction field evaluated from precomputed features.
CVec mode_column(const Mat& phi, const CMat& V, Eigen::Index j) {
  const Vec re = phi * V.col(j).real();
  const Vec im = phi * V.col(j).imag();
  CVec out(re.size());
  out.real() = re;
  out.imag() = im;
  return out;
}

void evaluate_dictionary_model(const ExperimentConfig& cfg, const ParticleEnsemble& truth,
                               const SnapshotDataset& data, ExperimentResult& r) {
  const Dictionary& dict = *r.dict;
  const KoopmanModel& model = *r.model;
  const int n = window_steps(cfg);

  // Starts s >= 1 (every dictionary shares the start set), each start with
  // a preceding training pair (s - 1, s).
  std::vector<Mat> states(truth.states.begin() + 1, truth.states.end());
  EvalOptions eo;
  eo.nt = cfg.eval.nt;
  eo.lt = cfg.eval.lt;
  eo.start_stride = cfg.eval.start_stride;
  eo.max_start = n - 1;
  const bool per_pair =
      r.kind != DictionaryKind::Rff && cfg.eval.baseline_fit == BaselineFit::PerPair;
  if (per_pair) {
    KoopmanModel cached;
    int cached_for = -1;
    r.nt_lt = evaluate_nt_lt(
        [&](int s) -> const KoopmanModel& {
          if (cached_for != s) {
            SnapshotDataset one;
            one.X = {truth.states[static_cast<std::size_t>(s)]};
            one.Y = {truth.states[static_cast<std::size_t>(s) + 1]};
            one.dt = data.dt;
            cached = fit_model(dict, one, cfg.train.ridge);
            cached_for = s;
          }
          return cached;
        },
        dict, states, eo);
  } else {
    r.nt_lt = evaluate_nt_lt(model, dict, states, eo);
  }

  // Eigenfunction errors at random points against the true flow map.
  const auto [lo, hi] = cfg.domain();
  const Mat samples = sample_uniform(lo, hi, cfg.eval.eigen_samples, cfg.seed ^ kEigenSalt);
  const double dt = cfg.eval.eigen_dt > 0.0 ? cfg.eval.eigen_dt : cfg.step;
  const Mat propagated = propagate(cfg.params, samples, cfg.t0, dt, cfg.solver);
  const Eigen::Index M = model.features();
  r.eigen = eigfunc_error(model, dict, samples, propagated, std::min<Eigen::Index>(cfg.eval.top_j, M));

  const Mat grid = sample_grid(lo, hi, cfg.eval.field_grid);
  const Mat phi_grid = evaluate(dict, grid);
  r.field.grid = grid;
  r.field.eigenvalues = model.mu.head(std::min<Eigen::Index>(cfg.eval.top_j, M));
  r.field.values.resize(grid.rows(), r.field.eigenvalues.size());
  for (Eigen::Index j = 0; j < r.field.eigenvalues.size(); ++j)
    r.field.values.col(j) = mode_column(phi_grid, model.V, j);
  if (const auto dom = dominant_nontrivial(
          model.mu, [&](Eigen::Index j) { return mode_column(phi_grid, model.V, j); })) {
    const auto errs = eigfunc_error(model, dict, samples, propagated, *dom + 1);
    r.dominant = ModeSummary{*dom, errs.back()};
  }
}

void run_kernel(const ExperimentConfig& cfg, const SnapshotDataset& data, ExperimentResult& r,
                std::ostream* log) {
  const auto& d = cfg.dictionary;
  const int pairs = static_cast<int>(data.pairs());
  const Eigen::Index particles = data.particles();
  std::mt19937_64 rng(cfg.seed ^ kKernelSalt);
  std::uniform_int_distribution<int> pick_pair(0, pairs - 1);
  std::uniform_int_distribution<Eigen::Index> pick_particle(0, particles - 1);
  const Eigen::Index dim = data.dim();
  Mat X(d.samples, dim), Y(d.samples, dim);
  for (int i = 0; i < d.samples; ++i) {
    const int t = pick_pair(rng);
    const Eigen::Index p = pick_particle(rng);
    X.row(i) = data.X[static_cast<std::size_t>(t)].row(p);
    Y.row(i) = data.Y[static_cast<std::size_t>(t)].row(p);
  }
  r.kernel = kernel_edmd(X, Y, d.sigma, d.regularization, log);
  const KernelEdmdResult& k = *r.kernel;

  const auto [lo, hi] = cfg.domain();
  const Mat grid = sample_grid(lo, hi, cfg.eval.field_grid);
  const Mat kg = kernel_gram(k.sigma, grid, k.centers);
  const Eigen::Index modes = k.eigenvalues.size();
  r.field.grid = grid;
  r.field.eigenvalues = k.eigenvalues.head(std::min<Eigen::Index>(cfg.eval.top_j, modes));
  r.field.values.resize(grid.rows(), r.field.eigenvalues.size());
  for (Eigen::Index j = 0; j < r.field.eigenvalues.size(); ++j)
    r.field.values.col(j) = mode_column(kg, k.coefficients, j);

  const Mat samples = sample_uniform(lo, hi, cfg.eval.eigen_samples, cfg.seed ^ kEigenSalt);
  const double dt = cfg.eval.eigen_dt > 0.0 ? cfg.eval.eigen_dt : cfg.step;
  const Mat propagated = propagate(cfg.params, samples, cfg.t0, dt, cfg.solver);
  const Mat ks = kernel_gram(k.sigma, samples, k.centers);
  const Mat kp = kernel_gram(k.sigma, propagated, k.centers);
  auto report = [&](Eigen::Index j) {
    const CVec a = mode_column(ks, k.coefficients, j);
    const CVec b = mode_column(kp, k.coefficients, j);
    EigenErrorReport e;
    e.eigen_index = j;
    e.mu = k.eigenvalues[j];
    e.sample_count = samples.rows();
    const double I = static_cast<double>(samples.rows());
    e.e_f = std::sqrt((b - e.mu * a).squaredNorm() / I);
    const double rms = std::sqrt(a.squaredNorm() / I);
    e.relative_e_f = rms > 0.0 ? e.e_f / rms : std::numeric_limits<double>::infinity();
    return e;
  };
  for (Eigen::Index j = 0; j < r.field.eigenvalues.size(); ++j) r.eigen.push_back(report(j));
  if (const auto dom = dominant_nontrivial(
          k.eigenvalues, [&](Eigen::Index j) { return mode_column(kg, k.coefficients, j); }))
    r.dominant = ModeSummary{*dom, report(*dom)};
}

}  // namespace

ExperimentResult execute(const ExperimentConfig& cfg, const ParticleEnsemble& truth,
                         const ExecuteHooks& hooks) {
  cfg.validate();
  require(static_cast<int>(truth.states.size()) >= truth_steps(cfg) + 1,
          "execute: ground truth shorter than the evaluation needs");
  const SnapshotDataset data = training_window(cfg, truth);
  ExperimentResult r;
  r.kind = cfg.dictionary.kind;

  switch (cfg.dictionary.kind) {
    case DictionaryKind::Kernel:
      run_kernel(cfg, data, r, hooks.log);
      return r;
    case DictionaryKind::Gaussian:
    case DictionaryKind::Monomial: {
      r.dict = fixed_dictionary(cfg);
      r.model = fit_model(*r.dict, data, cfg.train.ridge);
      break;
    }
    case DictionaryKind::Rff: {
      TrainConfig tc = cfg.train;
      tc.seed = cfg.seed;
      RffDictionary d0 = rff_init(cfg.dictionary.features, data.dim(), cfg.dictionary.bandwidth,
                                  cfg.seed);
      if (cfg.online) {
        TrainState state = online_init(std::move(d0));
        for (int epoch = 0; epoch < std::max(1, tc.epochs); ++epoch) {
          for (std::size_t t = 0; t < data.pairs(); ++t) {
            const std::size_t before = state.history.size();
            state = online_ingest(std::move(state), data.X[t], data.Y[t], tc);
            for (std::size_t h = before; h < state.history.size(); ++h)
              if (hooks.on_loss) hooks.on_loss(state.history[h]);
            if (hooks.on_checkpoint) hooks.on_checkpoint(state.step, state.dict);
          }
        }
        r.model = online_model(state, tc);
        r.history = state.history;
        r.dict = state.dict;
      } else {
        StepHook on_step;
        if (hooks.on_checkpoint)
          on_step = [&](long step, const RffDictionary& d) { hooks.on_checkpoint(step, d); };
        FitResult fr = fit(data, std::move(d0), tc, hooks.on_loss, on_step);
        r.model = std::move(fr.model);
        r.history = std::move(fr.history);
        r.dict = std::move(fr.dict);
      }
      break;
    }
  }
  evaluate_dictionary_model(cfg, truth, data, r);
  return r;
}

// ---------------------------------------------------------------------------
// run directory

namespace {

class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (!f)
      throw UsageError("output directory is locked by another run (" + path_.string() +
                       " exists; remove it if no run is active)");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("missing file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

json loss_json(const LossRecord& r) {
  return {{"step", r.step},         {"data_term", r.data_term}, {"k_reg", r.k_reg},
          {"theta_reg", r.theta_reg}, {"total", r.total},       {"surrogate", r.surrogate},
          {"wall_ms", r.wall_ms}};
}

// Kernel eigenfunctions are stored for the leading modes only.
constexpr Eigen::Index kKernelStoredModes = 32;

json kernel_json(const KernelEdmdResult& k, Eigen::Index keep) {
  keep = std::min(keep, k.coefficients.cols());
  return {{"format_version", 1},
          {"type", "kernel"},
          {"N", k.centers.rows()},
          {"d", k.centers.cols()},
          {"modes", keep},
          {"sigma", k.sigma},
          {"jitter", k.jitter},
          {"centers", detail::mat_rows(k.centers)},
          {"eigenvalues", detail::cmat_rows(CMat(k.eigenvalues.head(keep)))},
          {"coefficients", detail::cmat_rows(CMat(k.coefficients.leftCols(keep)))}};
}

KernelEdmdResult kernel_from_json(const json& j) {
  KernelEdmdResult k;
  require(j.at("format_version").get<int>() == 1, "kernel.json: unsupported format_version");
  k.sigma = j.at("sigma").get<double>();
  k.jitter = j.at("jitter").get<double>();
  const auto n = j.at("N").get<Eigen::Index>();
  const auto d = j.at("d").get<Eigen::Index>();
  const auto modes = j.at("modes").get<Eigen::Index>();
  require(n > 0 && d > 0 && modes > 0, "kernel.json: empty checkpoint");
  k.centers = detail::mat_from_rows(j.at("centers"), n, d, "kernel centers");
  k.eigenvalues = detail::cmat_from_rows(j.at("eigenvalues"), modes, 1, "kernel eigenvalues").col(0);
  k.coefficients = detail::cmat_from_rows(j.at("coefficients"), n, modes, "kernel coefficients");
  return k;
}

json cplx_json(cplx z) { return json::array({z.real(), z.imag()}); }

json results_json(const ExperimentConfig& cfg, const ExperimentResult& r) {
  json j;
  j["name"] = cfg.name;
  j["system"] = system_name(cfg.system);
  j["dictionary"] = dictionary_label(r.kind);
  j["seed"] = cfg.seed;
  if (r.nt_lt) {
    j["nt"] = to_json(r.nt_lt->nt);
    j["lt"] = to_json(r.nt_lt->lt);
    j["starts"] = r.nt_lt->starts.size();
    j["max_imag_residual"] = r.nt_lt->max_imag_residual;
    j["baseline_fit"] = r.kind == DictionaryKind::Rff
                            ? "global"
                            : kBaselineNames.name(cfg.eval.baseline_fit);
  }
  if (r.model) {
    j["features"] = r.model->features();
    j["excluded_modes"] = r.model->excluded_modes();
  }
  json mu = json::array();
  const CVec& eigs = r.model ? r.model->mu : r.kernel->eigenvalues;
  for (Eigen::Index i = 0; i < std::min<Eigen::Index>(eigs.size(), 20); ++i)
    mu.push_back(cplx_json(eigs[i]));
  j["leading_eigenvalues"] = mu;
  json errs = json::array();
  for (const auto& e : r.eigen) errs.push_back(to_json(e));
  j["eigen_errors"] = errs;
  j["dominant_nontrivial"] = r.dominant ? to_json(r.dominant->error) : json(nullptr);
  if (!r.history.empty()) {
    j["train"] = {{"steps", r.history.size()},
                  {"initial_data_term", r.history.front().data_term},
                  {"final_data_term", r.history.back().data_term}};
  }
  return j;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg_in, std::ostream& log) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  const auto [lo, hi] = cfg.domain();
  cfg.domain_lo = lo;
  cfg.domain_hi = hi;
  if (cfg.sampling == Sampling::Lattice) {
    cfg.counts = cfg.lattice();
    cfg.particles = cfg.particle_count();
  }

  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  const RunLock lock(dir / ".lock");
  write_json(dir / "config.resolved.json", to_json(cfg));
  for (const char* stale : {"results.csv", "results.json", "model.json", "dictionary.json",
                            "kernel.json", "field.csv", "dictionary.partial.json"})
    fs::remove(dir / stale);

  const ParticleEnsemble truth = load_or_simulate(cfg, cache_dir_from_env(), &log);

  std::ofstream train_log(dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  ExecuteHooks hooks;
  hooks.log = &log;
  hooks.on_loss = [&](const LossRecord& rec) { train_log << loss_json(rec).dump() << "\n" << std::flush; };
  if (cfg.checkpoint_interval > 0) {
    fs::create_directories(dir / "checkpoints");
    hooks.on_checkpoint = [&](long step, const RffDictionary& d) {
      if (step % cfg.checkpoint_interval == 0)
        write_json(dir / "checkpoints" / ("dictionary_step" + std::to_string(step) + ".json"),
                   to_json(Dictionary{d}));
    };
  }

  ExperimentResult r;
  try {
    r = execute(cfg, truth, hooks);
  } catch (const TrainingAborted& e) {
    write_json(dir / "dictionary.partial.json", to_json(Dictionary{e.last_dict}));
    throw;
  }

  {
    std::ostringstream csv;
    std::vector<TableRow> rows;
    if (r.nt_lt) rows.push_back(r.row(cfg));
    write_table_csv(csv, rows);
    write_text(dir / "results.csv", csv.str());
  }
  write_json(dir / "results.json", results_json(cfg, r));
  if (r.model) {
    json m = to_json(*r.model);
    m["dictionary_ref"] = "dictionary.json";
    write_json(dir / "model.json", m);
    write_json(dir / "dictionary.json", to_json(*r.dict));
  } else {
    Eigen::Index keep = std::max<Eigen::Index>(kKernelStoredModes, cfg.eval.top_j);
    if (r.dominant) keep = std::max(keep, r.dominant->index + 1);
    write_json(dir / "kernel.json", kernel_json(*r.kernel, keep));
  }
  {
    std::ostringstream csv;
    write_field_csv(csv, r.field);
    write_text(dir / "field.csv", csv.str());
  }
  if (r.nt_lt)
    log << "NT " << r.nt_lt->nt.e_p << "  LT " << r.nt_lt->lt.e_p << "  ("
        << r.nt_lt->starts.size() << " starts)\n";
  if (r.dominant)
    log << "dominant nontrivial mode " << r.dominant->index << "  mu " << r.dominant->error.mu
        << "  e_f " << r.dominant->error.e_f << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// compare / export

namespace {

int system_rank(const std::string& s) {
  for (SystemKind k : {SystemKind::Duffing, SystemKind::DoubleGyre, SystemKind::Bickley})
    if (system_name(k) == s) return static_cast<int>(k);
  return 100;
}

int dictionary_rank(const std::string& s) {
  for (DictionaryKind k : {DictionaryKind::Rff, DictionaryKind::Gaussian, DictionaryKind::Monomial,
                           DictionaryKind::Kernel})
    if (dictionary_label(k) == s) return static_cast<int>(k);
  return 100;
}

}  // namespace

std::vector<TableRow> compare_runs(const std::vector<fs::path>& run_dirs) {
  require(!run_dirs.empty(), "compare: no run directories given");
  std::vector<TableRow> merged;
  for (const auto& dir : run_dirs) {
    const fs::path file = dir / "results.csv";
    std::ifstream in(file);
    if (!in) throw UsageError("compare: missing results: " + file.string());
    for (TableRow& row : read_table_csv(in, dir.string())) {
      auto same = std::find_if(merged.begin(), merged.end(), [&](const TableRow& m) {
        return m.system == row.system && m.dictionary == row.dictionary;
      });
      if (same == merged.end()) {
        merged.push_back(std::move(row));
        continue;
      }
      if (same->nt == row.nt && same->lt == row.lt) continue;
      std::ostringstream msg;
      msg << std::setprecision(17) << "compare: conflicting rows for (" << row.system << ", "
          << row.dictionary << "): " << same->source << " has NT " << same->nt << " LT " << same->lt
          << ", " << row.source << " has NT " << row.nt << " LT " << row.lt;
      throw UsageError(msg.str());
    }
  }
  std::stable_sort(merged.begin(), merged.end(), [](const TableRow& a, const TableRow& b) {
    const auto ka = std::make_tuple(system_rank(a.system), a.system, dictionary_rank(a.dictionary), a.dictionary);
    const auto kb = std::make_tuple(system_rank(b.system), b.system, dictionary_rank(b.dictionary), b.dictionary);
    return ka < kb;
  });
  return merged;
}

std::vector<int> parse_grid(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != part.size() || v < 1)
      throw UsageError("grid '" + text + "' must look like WxH with positive integers");
    out.push_back(v);
  }
  if (out.empty() || text.back() == 'x')
    throw UsageError("grid '" + text + "' must look like WxH with positive integers");
  return out;
}

fs::path export_field(const fs::path& run_dir, int top_j, const std::vector<int>& grid,
                      const std::optional<fs::path>& out) {
  require(top_j >= 1, "export-field: --top-j must be >= 1");
  const fs::path cfg_path = run_dir / "config.resolved.json";
  if (!fs::exists(cfg_path))
    throw UsageError("export-field: " + run_dir.string() + " is not a run directory (no config.resolved.json)");
  const ExperimentConfig cfg = load_config(cfg_path);
  const auto [lo, hi] = cfg.domain();
  require(static_cast<Eigen::Index>(grid.size()) == lo.size(),
          "export-field: grid needs " + std::to_string(lo.size()) + " sizes");
  const Mat points = sample_grid(lo, hi, grid);

  EigenfunctionField field;
  if (cfg.dictionary.kind == DictionaryKind::Kernel) {
    const fs::path kp = run_dir / "kernel.json";
    if (!fs::exists(kp)) throw UsageError("export-field: missing checkpoint " + kp.string());
    const KernelEdmdResult k = kernel_from_json(read_json(kp));
    require(top_j <= k.coefficients.cols(),
            "export-field: kernel checkpoint stores " + std::to_string(k.coefficients.cols()) +
                " modes, asked for " + std::to_string(top_j));
    field = kernel_eigenfunction_field(k, points, top_j);
  } else {
    const fs::path mp = run_dir / "model.json", dp = run_dir / "dictionary.json";
    if (!fs::exists(mp)) throw UsageError("export-field: missing checkpoint " + mp.string());
    if (!fs::exists(dp)) throw UsageError("export-field: missing checkpoint " + dp.string());
    const KoopmanModel model = model_from_json(read_json(mp));
    const Dictionary dict = dictionary_from_json(read_json(dp));
    require(top_j <= model.features(),
            "export-field: model has " + std::to_string(model.features()) + " modes, asked for " +
                std::to_string(top_j));
    field = eigenfunction_field(model, dict, points, top_j);
  }

  std::string name = "field_top" + std::to_string(top_j) + "_";
  for (std::size_t i = 0; i < grid.size(); ++i) name += (i ? "x" : "") + std::to_string(grid[i]);
  const fs::path target = out ? *out : run_dir / (name + ".csv");
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  std::ostringstream csv;
  write_field_csv(csv, field);
  write_text(target, csv.str());
  return target;
}

}  // namespace krff
