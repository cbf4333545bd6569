// SPDX-License-Identifier: Apache-2.0
#include "arlab/harness.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace arlab {

namespace fs = std::filesystem;

namespace {

constexpr int kModelVersion = 1;
constexpr int kReportVersion = 1;
constexpr std::uint64_t kFeatureSeedIndex = 0xfea7;

// --- strict JSON object reading -------------------------------------------

class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw FormatError(where_ + " must be an object");
  }

  const Json* find(const char* key) {
    const auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.push_back(key);
    return &*it;
  }

  void number(const char* key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }

  template <class Int>
  void integer(const char* key, Int& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<Int>();
    }
  }

  void seed(const char* key, std::uint64_t& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0))
        fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }

  void boolean(const char* key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }

  void string(const char* key, std::string& out) {
    if (const Json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }

  void numbers(const char* key, std::vector<double>& out) {
    if (const Json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) fail(key, "an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw FormatError("unknown key '" + where_ + "." + it.key() + "'");
  }

 private:
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw FormatError("'" + where_ + "." + key + "' must be " + what);
  }

  const Json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

Json spec_json(const SequenceSpec& s) {
  return Json{{"n_frames", s.n_frames}, {"frame_dim", s.frame_dim}, {"chunk_size", s.chunk_size}};
}

SequenceSpec spec_from(const Json& j, const std::string& where) {
  SequenceSpec s;
  ObjectReader r(j, where);
  r.integer("n_frames", s.n_frames);
  r.integer("frame_dim", s.frame_dim);
  r.integer("chunk_size", s.chunk_size);
  r.finish();
  return s;
}

Json train_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate}, {"step_count", c.step_count},   {"batch_size", c.batch_size},
              {"ridge_lambda", c.ridge_lambda},   {"ema_rate", c.ema_rate},       {"loss_weight", c.loss_weight},
              {"fake_update_ratio", c.fake_update_ratio}, {"fake_memory", c.fake_memory},
              {"optimizer", to_string(c.optimizer)},      {"sample_count", c.sample_count},
              {"t_min", c.t_min},                 {"t_max", c.t_max},             {"cd_grid", c.cd_grid}};
}

void read_train(const Json& j, const std::string& where, TrainConfig& c) {
  ObjectReader r(j, where);
  r.number("learning_rate", c.learning_rate);
  r.integer("step_count", c.step_count);
  r.integer("batch_size", c.batch_size);
  r.number("ridge_lambda", c.ridge_lambda);
  r.number("ema_rate", c.ema_rate);
  r.number("loss_weight", c.loss_weight);
  r.integer("fake_update_ratio", c.fake_update_ratio);
  r.number("fake_memory", c.fake_memory);
  std::string opt = to_string(c.optimizer);
  r.string("optimizer", opt);
  c.optimizer = optimizer_from_string(opt);
  r.integer("sample_count", c.sample_count);
  r.number("t_min", c.t_min);
  r.number("t_max", c.t_max);
  r.integer("cd_grid", c.cd_grid);
  r.finish();
}

Json model_json(const ModelConfig& m) { return Json{{"m", m.m}, {"frequency_scale", m.frequency_scale}}; }

void read_model(const Json& j, const std::string& where, ModelConfig& m) {
  ObjectReader r(j, where);
  r.integer("m", m.m);
  r.number("frequency_scale", m.frequency_scale);
  r.finish();
}

std::string forcing_name(Forcing f) { return f == Forcing::teacher ? "tf" : "df"; }

Forcing forcing_from(const std::string& s) {
  if (s == "tf") return Forcing::teacher;
  if (s == "df") return Forcing::diffusion;
  throw DomainError("unknown forcing '" + s + "' (expected tf or df)");
}

std::string prefix_source_name(PrefixSource p) { return p == PrefixSource::data ? "data" : "rollout"; }

PrefixSource prefix_source_from(const std::string& s) {
  if (s == "data") return PrefixSource::data;
  if (s == "rollout") return PrefixSource::rollout;
  throw DomainError("unknown prefix source '" + s + "'");
}

// Converts DomainError raised while interpreting enum strings in a config
// into FormatError, the error class of malformed documents.
template <class F>
void as_format(F&& f) {
  try {
    f();
  } catch (const FormatError&) {
    throw;
  } catch (const DomainError& e) {
    throw FormatError(e.what());
  }
}

// --- small file helpers ------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot open '" + path.string() + "' for writing");
  out << text;
  out.flush();
  if (!out) throw std::ios_base::failure("write to '" + path.string() + "' failed");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string full_precision(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string time_key(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", t);
  return buf;
}

Json vec_json(const Vec& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v(i))) throw NumericalError("cannot serialize a non-finite value");
    a.push_back(v(i));
  }
  return a;
}

Vec vec_from(const Json& j, Index expected, std::size_t line, const char* what) {
  if (!j.is_array()) throw FormatError(std::string(what) + " must be an array", line);
  if (static_cast<Index>(j.size()) != expected)
    throw FormatError(std::string(what) + " has " + std::to_string(j.size()) + " entries, expected " +
                          std::to_string(expected),
                      line);
  Vec v(expected);
  for (Index i = 0; i < expected; ++i) {
    const Json& e = j[static_cast<std::size_t>(i)];
    if (!e.is_number()) throw FormatError(std::string(what) + " must hold numbers", line);
    v(i) = e.get<double>();
  }
  return v;
}

Json per_time(const std::vector<Vec>& values, const TimestepGrid& grid) {
  Json o = Json::object();
  for (std::size_t k = 0; k < values.size(); ++k) o[time_key(grid.times[k])] = vec_json(values[k]);
  return o;
}

std::vector<Vec> per_time_from(const Json& j, const TimestepGrid& grid, Index dim, std::size_t line, const char* what) {
  if (!j.is_object()) throw FormatError(std::string(what) + " must be an object keyed by time", line);
  if (j.empty()) return {};
  if (j.size() != grid.size()) throw FormatError(std::string(what) + " does not cover the grid", line);
  std::vector<Vec> out;
  for (double t : grid.times) {
    const auto it = j.find(time_key(t));
    if (it == j.end()) throw FormatError(std::string(what) + " lacks time " + time_key(t), line);
    out.push_back(vec_from(*it, dim, line, what));
  }
  return out;
}

Json parse_line(const std::string& line, std::size_t number) {
  try {
    return Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("malformed JSON: ") + e.what(), number);
  }
}

void check_header(const Json& h, const char* format, int supported, std::size_t line) {
  if (!h.is_object() || h.value("format", "") != format)
    throw FormatError(std::string("not an ") + format + " file", line);
  if (!h.contains("version") || !h["version"].is_number_integer()) throw FormatError("header lacks a version", line);
  const int v = h["version"].get<int>();
  if (v > supported)
    throw VersionError("format version " + std::to_string(v) + " is newer than supported version " +
                           std::to_string(supported),
                       line);
  if (v < 1) throw FormatError("invalid format version " + std::to_string(v), line);
}

// --- CSV ---------------------------------------------------------------------

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  std::size_t line = 1;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (ch == '\n') ++line;
        field += ch;
      }
      continue;
    }
    if (ch == '"') {
      if (!field.empty()) throw FormatError("stray quote inside a CSV field", line);
      quoted = true;
      any = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (ch == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
      ++line;
    } else if (ch != '\r') {
      field += ch;
      any = true;
    }
  }
  if (quoted) throw FormatError("unterminated quoted CSV field", line);
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw FormatError("'" + s + "' is not a number", line);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

SequenceDistribution DistributionConfig::build() const {
  if (kind == "bivariate") return bivariate_gaussian(rho);
  if (kind == "ar1") return ar1_gaussian(n_frames, corr, chunk_size);
  if (kind == "two-mode") return two_mode_mixture(offset, variance);
  if (kind == "standard-normal") return standard_normal_dist(spec);
  if (kind == "mixture") {
    spec.validate();
    if (components.empty()) throw DomainError("mixture distribution needs components");
    std::vector<GaussianComponent> comps;
    for (const auto& c : components) {
      const Index d = spec.dim();
      if (static_cast<Index>(c.mean.size()) != d || static_cast<Index>(c.cov.size()) != d)
        throw ShapeError("component table does not match the sequence dimension");
      Mat cov(d, d);
      for (Index i = 0; i < d; ++i) {
        const auto& row = c.cov[static_cast<std::size_t>(i)];
        if (static_cast<Index>(row.size()) != d) throw ShapeError("covariance table is not square");
        for (Index k = 0; k < d; ++k) cov(i, k) = row[static_cast<std::size_t>(k)];
      }
      comps.emplace_back(c.weight, Eigen::Map<const Vec>(c.mean.data(), d), cov);
    }
    return SequenceDistribution(spec, GaussianMixture(std::move(comps)));
  }
  throw DomainError("unknown distribution kind '" + kind + "'");
}

std::string to_string(OdeArm a) {
  switch (a) {
    case OdeArm::none: return "none";
    case OdeArm::asymmetric: return "asymmetric-ode";
    case OdeArm::causal: return "causal-ode";
  }
  return "unknown";
}

std::string to_string(CdArm a) {
  switch (a) {
    case CdArm::none: return "none";
    case CdArm::causal: return "causal-cd";
    case CdArm::asymmetric: return "asymmetric-cd";
  }
  return "unknown";
}

OdeArm ode_arm_from_string(const std::string& s) {
  if (s == "none") return OdeArm::none;
  if (s == "asymmetric-ode") return OdeArm::asymmetric;
  if (s == "causal-ode") return OdeArm::causal;
  throw DomainError("unknown ODE arm '" + s + "'");
}

CdArm cd_arm_from_string(const std::string& s) {
  if (s == "none") return CdArm::none;
  if (s == "causal-cd") return CdArm::causal;
  if (s == "asymmetric-cd") return CdArm::asymmetric;
  throw DomainError("unknown CD arm '" + s + "'");
}

ExperimentConfig::ExperimentConfig() {
  ar_diffusion.sample_count = 100000;
  distill.ridge_lambda = 1e-3;
  dmd.optimizer = Optimizer::adam;
  dmd.learning_rate = 1e-2;
  dmd.step_count = 500;
  dmd.batch_size = 512;
  cd.optimizer = Optimizer::adam;
  cd.learning_rate = 1e-2;
  cd.step_count = 20000;
  cd.batch_size = 256;
}

void ExperimentConfig::validate() const {
  distribution.build();
  grid.validate();
  if (solver_steps < 1) throw DomainError("solver_steps must be >= 1");
  if (pair_count < 1) throw DomainError("pair_count must be >= 1");
  if (teacher != "learned" && teacher != "oracle") throw DomainError("teacher must be 'learned' or 'oracle'");
  for (const ModelConfig* m : {&ar_model, &student}) {
    if (m->m < 1) throw DomainError("model width m must be >= 1");
    if (!(m->frequency_scale > 0.0)) throw DomainError("frequency_scale must be positive");
  }
  ar_diffusion.validate();
  distill.validate();
  dmd.validate();
  cd.validate();
  const PipelineConfig& p = pipeline;
  if (p.dmd && dmd.optimizer == Optimizer::ridge) throw DomainError("DMD needs optimizer sgd or adam");
  if (p.cd != CdArm::none && cd.optimizer == Optimizer::ridge) throw DomainError("CD needs optimizer sgd or adam");
  if (p.ode != OdeArm::none && p.cd != CdArm::none)
    throw DomainError("ODE distillation and CD are alternative initializations; enable one");
  if (p.ar_diffusion_init && (p.ode != OdeArm::none || p.cd != CdArm::none || !p.dmd))
    throw DomainError("ar_diffusion_init initializes DMD directly: needs dmd on and no ODE or CD stage");
  const bool gradient_ode = p.ode != OdeArm::none && distill.optimizer != Optimizer::ridge;
  if (p.fresh_init && (p.cd != CdArm::none || p.ar_diffusion_init || p.bidirectional_init ||
                       (p.ode != OdeArm::none && !gradient_ode) || (p.ode == OdeArm::none && !p.dmd)))
    throw DomainError("fresh_init starts the first gradient-trained student (ODE or DMD) from theta = 0");
  if (p.dmd && p.ode == OdeArm::none && p.cd == CdArm::none && !p.ar_diffusion_init && !p.fresh_init)
    throw DomainError("DMD needs an initialized generator (ODE, CD, ar_diffusion_init) or fresh_init");
  const bool copies_ar = p.ar_diffusion_init || p.cd != CdArm::none || p.bidirectional_init ||
                         (gradient_ode && !p.fresh_init);
  if (copies_ar && !(student == ar_model))
    throw DomainError("initializing the student from a diffusion model needs student and ar_model to match");
  if (p.bidirectional_init) {
    if (p.ode == OdeArm::none) throw DomainError("bidirectional_init applies to the ODE student");
    if (distill.optimizer == Optimizer::ridge)
      throw DomainError("bidirectional_init has no effect with a ridge distillation; use sgd or adam");
  }
  if (evaluation.n_anchor < 1 || evaluation.n_resample < 1 || evaluation.n_moment < 2 || evaluation.n_prefix < 1 ||
      evaluation.n_sample < 2 || evaluation.oracle_steps < 1 || evaluation.injectivity_anchors < 2 ||
      evaluation.injectivity_resamples < 2 || evaluation.kl_samples < 1)
    throw DomainError("evaluation sizes are too small");
  if (!(evaluation.injectivity_t > 0.0 && evaluation.injectivity_t <= 1.0))
    throw DomainError("injectivity_t must lie in (0, 1]");
  for (double r : rho_sweep)
    if (!(r > -1.0 && r < 1.0)) throw DomainError("rho_sweep entries must lie in (-1, 1)");
}

Json to_json(const ExperimentConfig& c) {
  Json comps = Json::array();
  for (const auto& t : c.distribution.components) comps.push_back({{"weight", t.weight}, {"mean", t.mean}, {"cov", t.cov}});
  const DistributionConfig& d = c.distribution;
  const PipelineConfig& p = c.pipeline;
  const EvalConfig& e = c.evaluation;
  return Json{
      {"distribution",
       {{"kind", d.kind}, {"rho", d.rho}, {"n_frames", d.n_frames}, {"corr", d.corr}, {"chunk_size", d.chunk_size},
        {"offset", d.offset}, {"variance", d.variance}, {"spec", spec_json(d.spec)}, {"components", comps}}},
      {"grid", c.grid.times},
      {"solver", to_string(c.solver)},
      {"solver_steps", c.solver_steps},
      {"pair_count", c.pair_count},
      {"teacher", c.teacher},
      {"ar_model", model_json(c.ar_model)},
      {"student", model_json(c.student)},
      {"train",
       {{"ar_diffusion", train_json(c.ar_diffusion)},
        {"distill", train_json(c.distill)},
        {"dmd", train_json(c.dmd)},
        {"cd", train_json(c.cd)}}},
      {"pipeline",
       {{"forcing", forcing_name(p.forcing)}, {"ode", to_string(p.ode)}, {"cd", to_string(p.cd)}, {"dmd", p.dmd},
        {"ar_diffusion_init", p.ar_diffusion_init}, {"bidirectional_init", p.bidirectional_init},
        {"fresh_init", p.fresh_init}, {"dmd_prefix_source", prefix_source_name(p.dmd_prefix_source)}}},
      {"evaluation",
       {{"n_anchor", e.n_anchor}, {"n_resample", e.n_resample}, {"n_moment", e.n_moment}, {"n_prefix", e.n_prefix},
        {"n_sample", e.n_sample}, {"oracle_steps", e.oracle_steps}, {"injectivity_t", e.injectivity_t},
        {"injectivity_anchors", e.injectivity_anchors}, {"injectivity_resamples", e.injectivity_resamples},
        {"kl_samples", e.kl_samples}, {"noisy_collapse", e.noisy_collapse}}},
      {"rho_sweep", c.rho_sweep},
      {"seed", c.seed},
      {"output_dir", c.output_dir}};
}

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  as_format([&] {
    ObjectReader r(j, "config");
    if (const Json* d = r.find("distribution")) {
      ObjectReader rd(*d, "config.distribution");
      DistributionConfig& dc = c.distribution;
      rd.string("kind", dc.kind);
      rd.number("rho", dc.rho);
      rd.integer("n_frames", dc.n_frames);
      rd.number("corr", dc.corr);
      rd.integer("chunk_size", dc.chunk_size);
      rd.number("offset", dc.offset);
      rd.number("variance", dc.variance);
      if (const Json* s = rd.find("spec")) dc.spec = spec_from(*s, "config.distribution.spec");
      if (const Json* comps = rd.find("components")) {
        if (!comps->is_array()) throw FormatError("'config.distribution.components' must be an array");
        dc.components.clear();
        for (const auto& cj : *comps) {
          ComponentTable t;
          ObjectReader rc(cj, "config.distribution.components[]");
          rc.number("weight", t.weight);
          rc.numbers("mean", t.mean);
          if (const Json* cov = rc.find("cov")) {
            if (!cov->is_array()) throw FormatError("component 'cov' must be an array of rows");
            for (const auto& row : *cov) {
              if (!row.is_array()) throw FormatError("component 'cov' must be an array of rows");
              std::vector<double> vals;
              for (const auto& x : row) {
                if (!x.is_number()) throw FormatError("component 'cov' must hold numbers");
                vals.push_back(x.get<double>());
              }
              t.cov.push_back(std::move(vals));
            }
          }
          rc.finish();
          dc.components.push_back(std::move(t));
        }
      }
      rd.finish();
    }
    r.numbers("grid", c.grid.times);
    std::string solver = to_string(c.solver);
    r.string("solver", solver);
    c.solver = solver_from_string(solver);
    r.integer("solver_steps", c.solver_steps);
    r.integer("pair_count", c.pair_count);
    r.string("teacher", c.teacher);
    if (const Json* m = r.find("ar_model")) read_model(*m, "config.ar_model", c.ar_model);
    if (const Json* m = r.find("student")) read_model(*m, "config.student", c.student);
    if (const Json* t = r.find("train")) {
      ObjectReader rt(*t, "config.train");
      if (const Json* s = rt.find("ar_diffusion")) read_train(*s, "config.train.ar_diffusion", c.ar_diffusion);
      if (const Json* s = rt.find("distill")) read_train(*s, "config.train.distill", c.distill);
      if (const Json* s = rt.find("dmd")) read_train(*s, "config.train.dmd", c.dmd);
      if (const Json* s = rt.find("cd")) read_train(*s, "config.train.cd", c.cd);
      rt.finish();
    }
    if (const Json* p = r.find("pipeline")) {
      ObjectReader rp(*p, "config.pipeline");
      std::string forcing = forcing_name(c.pipeline.forcing), ode = to_string(c.pipeline.ode),
                  cd = to_string(c.pipeline.cd), source = prefix_source_name(c.pipeline.dmd_prefix_source);
      rp.string("forcing", forcing);
      rp.string("ode", ode);
      rp.string("cd", cd);
      rp.string("dmd_prefix_source", source);
      rp.boolean("dmd", c.pipeline.dmd);
      rp.boolean("ar_diffusion_init", c.pipeline.ar_diffusion_init);
      rp.boolean("bidirectional_init", c.pipeline.bidirectional_init);
      rp.boolean("fresh_init", c.pipeline.fresh_init);
      rp.finish();
      c.pipeline.forcing = forcing_from(forcing);
      c.pipeline.ode = ode_arm_from_string(ode);
      c.pipeline.cd = cd_arm_from_string(cd);
      c.pipeline.dmd_prefix_source = prefix_source_from(source);
    }
    if (const Json* e = r.find("evaluation")) {
      ObjectReader re(*e, "config.evaluation");
      EvalConfig& ev = c.evaluation;
      re.integer("n_anchor", ev.n_anchor);
      re.integer("n_resample", ev.n_resample);
      re.integer("n_moment", ev.n_moment);
      re.integer("n_prefix", ev.n_prefix);
      re.integer("n_sample", ev.n_sample);
      re.integer("oracle_steps", ev.oracle_steps);
      re.number("injectivity_t", ev.injectivity_t);
      re.integer("injectivity_anchors", ev.injectivity_anchors);
      re.integer("injectivity_resamples", ev.injectivity_resamples);
      re.integer("kl_samples", ev.kl_samples);
      re.boolean("noisy_collapse", ev.noisy_collapse);
      re.finish();
    }
    r.numbers("rho_sweep", c.rho_sweep);
    r.seed("seed", c.seed);
    r.string("output_dir", c.output_dir);
    r.finish();
  });
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  const std::string text = read_text(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

ExperimentConfig apply_overrides(const ExperimentConfig& base, const Json& patch) {
  Json j = to_json(base);
  j.merge_patch(patch);
  return config_from_json(j);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

std::uint64_t feature_seed(const ExperimentConfig& cfg) { return split_seed(cfg.seed, kFeatureSeedIndex); }

std::string config_digest(const ExperimentConfig& cfg) {
  Json j = to_json(cfg);
  j.erase("output_dir");
  return fnv1a_hex(j.dump());
}

// ---------------------------------------------------------------------------

void save_dataset(const PairDataset& data, const fs::path& path) {
  for (std::size_t a = 0; a < data.grid.size(); ++a)
    for (std::size_t b = a + 1; b < data.grid.size(); ++b)
      if (time_key(data.grid.times[a]) == time_key(data.grid.times[b]))
        throw DomainError("grid times must differ in the first six decimals");
  std::string out;
  const Json header{{"format", "arlab-pairs"},
                    {"version", PairDataset::format_version},
                    {"spec", spec_json(data.spec)},
                    {"grid", data.grid.times},
                    {"provenance", to_string(data.provenance)},
                    {"teacher", data.teacher},
                    {"solver", data.solver},
                    {"steps", data.steps},
                    {"master_seed", data.master_seed},
                    {"records", data.records.size()}};
  out += header.dump() + "\n";
  for (const auto& r : data.records) {
    const Json rec{{"chunk", r.chunk_index},
                   {"seed", r.seed},
                   {"prefix", vec_json(r.prefix)},
                   {"noisy_prefix", per_time(r.noisy_prefix, data.grid)},
                   {"snapshots", per_time(r.snapshots, data.grid)},
                   {"endpoint", vec_json(r.endpoint)}};
    out += rec.dump() + "\n";
  }
  write_text(path, out);
}

PairDataset load_dataset(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open '" + path.string() + "' for reading");
  std::string line;
  std::size_t number = 0;
  if (!std::getline(in, line)) throw FormatError("empty dataset file", 1);
  ++number;
  const Json h = parse_line(line, number);
  check_header(h, "arlab-pairs", PairDataset::format_version, number);
  PairDataset d;
  std::size_t expected = 0;
  try {
    d.spec = spec_from(h.at("spec"), "header.spec");
    d.spec.validate();
    d.grid.times = h.at("grid").get<std::vector<double>>();
    d.grid.validate();
    d.provenance = provenance_from_string(h.at("provenance").get<std::string>());
    d.teacher = h.at("teacher").get<std::string>();
    d.solver = h.at("solver").get<std::string>();
    d.steps = h.at("steps").get<int>();
    d.master_seed = h.at("master_seed").get<std::uint64_t>();
    expected = h.at("records").get<std::size_t>();
  } catch (const FormatError& e) {
    throw FormatError(e.what(), number);
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad header: ") + e.what(), number);
  }
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) throw FormatError("empty line", number);
    const Json j = parse_line(line, number);
    if (!j.is_object()) throw FormatError("record must be an object", number);
    ODEPairRecord r;
    try {
      r.chunk_index = j.at("chunk").get<Index>();
      if (r.chunk_index < 0 || r.chunk_index >= d.spec.n_chunks()) throw FormatError("chunk index out of range", number);
      r.seed = j.at("seed").get<std::uint64_t>();
      r.prefix = vec_from(j.at("prefix"), d.spec.prefix_dim(r.chunk_index), number, "prefix");
      r.noisy_prefix = per_time_from(j.at("noisy_prefix"), d.grid, d.spec.prefix_dim(r.chunk_index), number, "noisy_prefix");
      r.snapshots = per_time_from(j.at("snapshots"), d.grid, d.spec.chunk_dim(), number, "snapshots");
      if (r.snapshots.size() != d.grid.size()) throw FormatError("snapshots do not cover the grid", number);
      r.endpoint = vec_from(j.at("endpoint"), d.spec.chunk_dim(), number, "endpoint");
      if (j.size() != 6) throw FormatError("record has unexpected fields", number);
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(std::string("bad record: ") + e.what(), number);
    }
    d.records.push_back(std::move(r));
  }
  if (d.records.size() != expected)
    throw FormatError("header announces " + std::to_string(expected) + " records, file has " +
                          std::to_string(d.records.size()),
                      number);
  return d;
}

void save_model(const ChunkwiseStudent& model, const fs::path& path) {
  Json heads = Json::array();
  for (Index c = 0; c < model.size(); ++c) {
    const LinearStudent& h = model.head(c);
    const FeatureSpec& s = h.spec();
    Json theta = Json::array();
    for (Index k = 0; k < h.theta().size(); ++k) theta.push_back(h.theta().data()[k]);
    heads.push_back({{"m", s.m}, {"frequency_scale", s.frequency_scale}, {"seed", s.seed}, {"theta", theta}});
  }
  const Json j{{"format", "arlab-model"}, {"version", kModelVersion},  {"spec", spec_json(model.spec())},
               {"role", to_string(model.role())}, {"heads", heads}};
  write_text(path, j.dump() + "\n");
}

ChunkwiseStudent load_model(const fs::path& path) {
  const Json j = parse_line(read_text(path), 1);
  check_header(j, "arlab-model", kModelVersion, 1);
  try {
    const SequenceSpec spec = spec_from(j.at("spec"), "model.spec");
    spec.validate();
    const Role role = role_from_string(j.at("role").get<std::string>());
    const Json& hj = j.at("heads");
    if (!hj.is_array() || static_cast<Index>(hj.size()) != spec.n_chunks())
      throw FormatError("model needs one head per chunk", 1);
    std::vector<LinearStudent> heads;
    for (std::size_t c = 0; c < hj.size(); ++c) {
      FeatureSpec fs{hj[c].at("m").get<Index>(), spec.chunk_dim(), spec.prefix_dim(static_cast<Index>(c)),
                     hj[c].at("frequency_scale").get<double>(), hj[c].at("seed").get<std::uint64_t>()};
      fs.validate();
      const Vec theta = vec_from(hj[c].at("theta"), fs.m * fs.chunk_dim, 1, "theta");
      heads.emplace_back(FeatureMap(fs), Eigen::Map<const Mat>(theta.data(), fs.m, fs.chunk_dim), role);
    }
    return ChunkwiseStudent(spec, role, std::move(heads));
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad model file: ") + e.what(), 1);
  }
}

// ---------------------------------------------------------------------------

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "jsonl") return ReportFormat::jsonl;
  throw DomainError("unknown report format '" + s + "' (expected csv or jsonl)");
}

std::string format_report(const DiagnosticsReport& report, ReportFormat format) {
  std::string out;
  if (format == ReportFormat::csv) {
    out = "name,value,uncertainty,sample_count,config_digest,note\n";
    for (const auto& [name, m] : report.metrics())
      out += csv_field(name) + "," + full_precision(m.value) + "," + full_precision(m.uncertainty) + "," +
             std::to_string(m.sample_count) + "," + csv_field(m.config_digest) + "," + csv_field(m.note) + "\n";
    return out;
  }
  out = Json{{"format", "arlab-report"}, {"version", kReportVersion}, {"metrics", report.metrics().size()}}.dump() + "\n";
  for (const auto& [name, m] : report.metrics())
    out += Json{{"name", name},
                {"value", m.value},
                {"uncertainty", m.uncertainty},
                {"sample_count", m.sample_count},
                {"config_digest", m.config_digest},
                {"note", m.note}}
               .dump() +
           "\n";
  return out;
}

void emit_report(const DiagnosticsReport& report, ReportFormat format, const fs::path& path) {
  write_text(path, format_report(report, format));
}

DiagnosticsReport parse_report(const std::string& text, ReportFormat format) {
  DiagnosticsReport report;
  if (format == ReportFormat::csv) {
    const auto rows = parse_csv(text);
    if (rows.empty()) throw FormatError("report has no header", 1);
    const std::vector<std::string> header{"name", "value", "uncertainty", "sample_count", "config_digest", "note"};
    if (rows[0] != header) throw FormatError("unexpected report header", 1);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() != header.size()) throw FormatError("expected 6 fields", i + 1);
      char* end = nullptr;
      const long long n = std::strtoll(r[3].c_str(), &end, 10);
      if (r[3].empty() || *end != '\0') throw FormatError("sample_count is not an integer", i + 1);
      report.add(r[0], Metric{parse_double(r[1], i + 1), parse_double(r[2], i + 1), static_cast<Index>(n), r[4], r[5]});
    }
    return report;
  }
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  if (!std::getline(in, line)) throw FormatError("report has no header", 1);
  ++number;
  check_header(parse_line(line, number), "arlab-report", kReportVersion, number);
  while (std::getline(in, line)) {
    ++number;
    const Json j = parse_line(line, number);
    try {
      report.add(j.at("name").get<std::string>(),
                 Metric{j.at("value").get<double>(), j.at("uncertainty").get<double>(), j.at("sample_count").get<Index>(),
                        j.at("config_digest").get<std::string>(), j.at("note").get<std::string>()});
    } catch (const Json::exception& e) {
      throw FormatError(std::string("bad metric: ") + e.what(), number);
    }
  }
  return report;
}

DiagnosticsReport read_report(const fs::path& path, ReportFormat format) {
  return parse_report(read_text(path), format);
}

void write_loss_trace(const std::vector<double>& trace, const fs::path& path) {
  std::string out = "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out += std::to_string(i + 1) + "," + full_precision(trace[i]) + "\n";
  write_text(path, out);
}

// ---------------------------------------------------------------------------

std::shared_ptr<const ArTeacher> make_teacher(const ExperimentConfig& cfg,
                                              const std::shared_ptr<const SequenceDistribution>& dist,
                                              const std::optional<ChunkwiseStudent>& ar_model) {
  if (cfg.teacher == "oracle") return std::make_shared<OracleArTeacher>(dist);
  if (!ar_model) throw DomainError("a learned teacher needs a trained AR diffusion model");
  return std::make_shared<LearnedArTeacher>(std::make_shared<const ChunkwiseStudent>(*ar_model));
}

void evaluate_generator(const ChunkGenerator& generator, const SequenceDistribution& dist, const ArTeacher& oracle,
                        const ExperimentConfig& cfg, const std::string& tag, DiagnosticsReport& report) {
  const EvalConfig& e = cfg.evaluation;
  const std::string digest = config_digest(cfg);
  report.add(tag + ".energy_distance",
             conditional_energy_distance(generator, dist, cfg.grid, e.n_prefix, e.n_sample, split_seed(cfg.seed, 101)),
             digest, "conditional energy distance to exact chunk conditionals");
  CollapseOptions o;
  o.mode = PrefixMode::clean;
  o.times = cfg.grid.times;
  o.n_anchor = e.n_anchor;
  o.n_resample = e.n_resample;
  o.n_moment = e.n_moment;
  o.steps = e.oracle_steps;
  o.seed = split_seed(cfg.seed, 102);
  const CollapseResult c = collapse_gap(generator, dist, oracle, o);
  report.add(tag + ".flow_rms", Metric{c.rms, 0.0, c.rms_samples, digest, "RMS to the clean-prefix flow map; point estimate"});
  report.add(tag + ".moment_deficit", c.deficit, digest, "E|x0|^2 - E|G|^2 summed over chunks");
  if (dist.spec.n_frames >= 2) {
    const Mat seq = rollout(generator, cfg.grid, e.n_sample, split_seed(cfg.seed, 103));
    report.add(tag + ".motion", motion_variability(seq, dist.spec), digest, "mean squared successive-frame difference");
  }
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& tag) {
  cfg.validate();
  const PipelineConfig& p = cfg.pipeline;
  auto dist = std::make_shared<const SequenceDistribution>(cfg.distribution.build());
  auto oracle = std::make_shared<const OracleArTeacher>(dist);
  const SequenceSpec& spec = dist->spec;
  const std::uint64_t features = feature_seed(cfg);
  const std::string digest = config_digest(cfg);
  auto stage_seed = [&](std::uint64_t k) { return split_seed(cfg.seed, k); };
  auto fresh = [&](Role role, const ModelConfig& m) {
    return ChunkwiseStudent(spec, role, m.m, m.frequency_scale, features);
  };
  // A velocity model used as a generator: G = x - t v is its one-step denoiser.
  auto as_generator = [&](const ChunkwiseStudent& velocity) {
    ChunkwiseStudent g = fresh(Role::generator, cfg.student);
    g.copy_parameters_from(velocity);
    return g;
  };

  PipelineResult out;
  const bool gradient_distill = cfg.distill.optimizer != Optimizer::ridge;
  const bool need_ar = (cfg.teacher == "learned" && (p.ode == OdeArm::causal || p.cd == CdArm::causal)) ||
                       p.ar_diffusion_init || p.cd != CdArm::none ||
                       (p.ode != OdeArm::none && gradient_distill && !p.bidirectional_init && !p.fresh_init);
  if (need_ar) {
    StageResult r = train_ar_diffusion(*dist, fresh(Role::ar_velocity, cfg.ar_model), cfg.ar_diffusion, p.forcing,
                                       stage_seed(1));
    out.traces.emplace_back("ar_diffusion", r.loss_trace);
    out.ar_model = std::move(r.model);
    if (spec.n_chunks() > 1 && spec.chunk_dim() == 1 && dist->mixture.size() == 1) {
      const LearnedArTeacher learned(std::make_shared<const ChunkwiseStudent>(*out.ar_model));
      out.report.add(tag + ".ar_diffusion.model_kl",
                     model_conditional_kl(learned, *dist, 1, 0.2, 0.8, cfg.evaluation.kl_samples, stage_seed(6)), digest,
                     "KL of the implied clean-prefix conditional of chunk 1 to the data conditional");
    }
  }
  std::shared_ptr<const ArTeacher> teacher;
  if (p.ode == OdeArm::causal || p.cd == CdArm::causal) teacher = make_teacher(cfg, dist, out.ar_model);

  std::optional<ChunkwiseStudent> gen;
  if (p.ode != OdeArm::none) {
    ChunkwiseStudent student = fresh(Role::generator, cfg.student);
    if (gradient_distill) {
      if (p.bidirectional_init) {
        StageResult bi = train_ar_diffusion(*dist, fresh(Role::ar_velocity, cfg.ar_model), cfg.ar_diffusion,
                                            Forcing::diffusion, stage_seed(7));
        out.traces.emplace_back("bidirectional_init", bi.loss_trace);
        student = as_generator(bi.model);
      } else if (!p.fresh_init) {
        student = as_generator(*out.ar_model);
      }
    }
    if (p.ode == OdeArm::asymmetric) {
      out.pairs = make_pairs_bi(*dist, cfg.grid, cfg.pair_count, cfg.solver_steps, stage_seed(2), cfg.solver);
    } else {
      out.pairs = make_pairs_causal(*dist, *teacher, cfg.grid, cfg.pair_count, cfg.solver_steps, stage_seed(2), cfg.solver);
    }
    StageResult r = ode_distill(*out.pairs, std::move(student), cfg.distill,
                                p.ode == OdeArm::asymmetric ? PrefixMode::noisy : PrefixMode::clean, stage_seed(3));
    out.traces.emplace_back("ode_distill", r.loss_trace);
    gen = std::move(r.model);
    if (p.ode == OdeArm::asymmetric && cfg.evaluation.noisy_collapse) {
      CollapseOptions o;
      o.mode = PrefixMode::noisy;
      o.times = cfg.grid.times;
      o.n_anchor = cfg.evaluation.n_anchor;
      o.n_resample = cfg.evaluation.n_resample;
      o.n_moment = cfg.evaluation.n_moment;
      o.steps = cfg.evaluation.oracle_steps;
      o.seed = stage_seed(8);
      const CollapseResult c = collapse_gap(*gen, *dist, *oracle, o);
      out.report.add(tag + ".noisy.flow_rms",
                     Metric{c.rms, 0.0, c.rms_samples, digest, "RMS to the conditional mean of the joint flow map"});
      out.report.add(tag + ".noisy.moment_deficit", c.deficit, digest, "E|x0|^2 - E|G|^2 with noisy prefixes");
      if (dist->mixture.size() == 1)
        out.report.add(tag + ".noisy.moment_deficit_exact",
                       Metric{collapse_deficit_exact(*dist, cfg.grid.times), 0.0, 0, digest,
                              "deficit of the conditional-mean student"});
    }
  }
  if (p.cd != CdArm::none) {
    const TeacherKind kind = p.cd == CdArm::causal ? TeacherKind::autoregressive : TeacherKind::bidirectional;
    const ArTeacher& step_teacher = teacher ? *teacher : static_cast<const ArTeacher&>(*oracle);
    StageResult r = cd_train(*dist, step_teacher, as_generator(*out.ar_model), cfg.cd, kind, stage_seed(4));
    out.traces.emplace_back("cd", r.loss_trace);
    gen = std::move(r.model);
  }
  if (p.dmd) {
    if (p.ar_diffusion_init) gen = as_generator(*out.ar_model);
    if (p.fresh_init && !gen) gen = fresh(Role::generator, cfg.student);
    evaluate_generator(*gen, *dist, *oracle, cfg, tag + ".init", out.report);
    const VelocityScore real(oracle);
    StageResult r = dmd_train(std::move(*gen), real, fresh(Role::fake_score, cfg.ar_model), *dist, cfg.grid, cfg.dmd,
                              stage_seed(5), DmdOptions{p.dmd_prefix_source, 8});
    out.traces.emplace_back("dmd", r.loss_trace);
    gen = std::move(r.model);
  }
  if (gen) {
    evaluate_generator(*gen, *dist, *oracle, cfg, tag, out.report);
    out.generator = std::move(gen);
  }
  return out;
}

}  // namespace arlab
