#include "diffuq/experiment.hpp"

#include "diffuq/autodiff.hpp"
#include "diffuq/baselines.hpp"
#include "diffuq/diffusion_sampler.hpp"
#include "diffuq/errors.hpp"
#include "diffuq/nn.hpp"
#include "diffuq/random.hpp"
#include "diffuq/targets.hpp"

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

namespace diffuq {

namespace fs = std::filesystem;
using nlohmann::json;

const json& default_config() {
  static const json d = json::parse(R"({
    "label": "",
    "seed": 0,
    "output_dir": "runs",
    "method": "diffuq",
    "n_samples": 64,
    "dataset": {
      "kind": "synthetic",
      "generator": "hetero_sine",
      "n_train": 2000,
      "n_test": 2000,
      "noise_scale": 1.0,
      "w_star": 1.5,
      "features": 40,
      "seed": null,
      "path": null,
      "feature_columns": [],
      "target": "y",
      "train_fraction": 0.8,
      "split_index": null,
      "sg_derivative": false,
      "sg_window": 15,
      "sg_order": 2
    },
    "model": {"preset": "hlt", "prior_var": 1.0, "noise_var": 1.0},
    "metrics": {"bins": 20},
    "diffuq": {
      "gamma": 1.0,
      "dt_train": 0.04,
      "dt_sample": 0.01,
      "batch_n": 256,
      "iterations": 5000,
      "lr": 0.001,
      "lr_final_fraction": 1.0,
      "minibatch": 256,
      "width": 32,
      "depth": 8,
      "checkpoint_format": "json"
    },
    "map": {"iterations": 3000, "lr": 0.01, "lr_final_fraction": 0.01, "minibatch": 256, "polish_iter": 500},
    "de": {"iterations": 3000, "lr": 0.01, "lr_final_fraction": 0.01, "minibatch": 256, "polish_iter": 500},
    "mcdropout": {"rate": 0.1, "iterations": 3000, "lr": 0.01, "lr_final_fraction": 0.01, "minibatch": 256},
    "mfvi": {"iterations": 20000, "lr": 0.01, "lr_final_fraction": 0.05, "init_log_std": -2.0, "minibatch": 256},
    "sgld": {"step_size": 0.0001, "n_steps": 20000, "burn_in": 0.5, "n_chains": 1, "minibatch": 256},
    "svgd": {"n_steps": 2000, "step": 0.001, "bandwidth": null, "minibatch": 256}
  })");
  return d;
}

namespace {

const char* type_name(const json& j) { return j.type_name(); }

void strict_merge(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config" + (path.empty() ? std::string() : " key '" + path + "'") + ": expected an object");
  for (const auto& [key, val] : user.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + p + "'");
    json& slot = base[key];
    if (slot.is_null()) {
      slot = val;
    } else if (slot.is_object()) {
      strict_merge(slot, val, p);
    } else if (slot.is_number_integer()) {
      if (!val.is_number_integer()) throw ConfigError("config key '" + p + "': expected an integer, got " + type_name(val));
      slot = val;
    } else if (slot.is_number()) {
      if (!val.is_number()) throw ConfigError("config key '" + p + "': expected a number, got " + type_name(val));
      slot = val.get<double>();
    } else if (slot.type() != val.type()) {
      throw ConfigError("config key '" + p + "': expected " + type_name(slot) + ", got " + type_name(val));
    } else {
      slot = val;
    }
  }
}

template <typename T>
T get(const json& j, const char* key) {
  return j.at(key).get<T>();
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '=' || c == '-' ? c : '_');
  return out;
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError(DataError::Kind::io, "cannot write " + p.string());
  os << content;
  if (!os) throw DataError(DataError::Kind::io, "write failed for " + p.string());
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError(DataError::Kind::io, "cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

MapConfig map_config(const json& m) {
  MapConfig c;
  c.opt.max_iter = get<int>(m, "iterations");
  c.opt.lr = get<double>(m, "lr");
  c.opt.lr_final_fraction = get<double>(m, "lr_final_fraction");
  if (m.contains("polish_iter")) c.polish_iter = get<int>(m, "polish_iter");
  return c;
}

}  // namespace

json resolve_config(const json& user) {
  json cfg = default_config();
  strict_merge(cfg, user, "");
  static const std::set<std::string> methods = {"diffuq", "map", "de", "mcdropout", "mfvi", "sgld", "svgd"};
  const auto method = cfg["method"].get<std::string>();
  if (!methods.count(method))
    throw ConfigError("unknown method '" + method + "' (expected diffuq, map, de, mcdropout, mfvi, sgld or svgd)");
  if (cfg["n_samples"].get<long>() < 1) throw ConfigError("n_samples must be positive");
  if (cfg["metrics"]["bins"].get<int>() < 1) throw ConfigError("metrics.bins must be at least 1");
  const auto kind = cfg["dataset"]["kind"].get<std::string>();
  if (kind != "synthetic" && kind != "csv") throw ConfigError("dataset.kind must be synthetic or csv");
  if (kind == "csv" && !cfg["dataset"]["path"].is_string()) throw ConfigError("dataset.path must name a csv file");
  return cfg;
}

json load_config(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &config;
  std::istringstream ks(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ks, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError("override '" + key + "': '" + parts[i] + "' is not a section");
    node = &next;
  }
  (*node)[parts.back()] = value;
}

std::unique_ptr<RegressionModel> make_model(const json& config, Eigen::Index input_dim) {
  const json& m = config.at("model");
  const auto preset = get<std::string>(m, "preset");
  if (preset == "pensim" || preset == "hlt") return std::make_unique<HeteroModel>(HeteroModel::preset(preset, input_dim));
  if (preset == "linear") return std::make_unique<LinearGaussianModel>(input_dim, get<double>(m, "noise_var"));
  if (preset == "abs_linear") {
    if (input_dim != 1) throw ConfigError("abs_linear model needs exactly one input feature");
    return std::make_unique<AbsLinearModel>(get<double>(m, "noise_var"));
  }
  throw ConfigError("unknown model preset '" + preset + "' (expected pensim, hlt, linear or abs_linear)");
}

Split make_split(const json& config) {
  const json& d = config.at("dataset");
  if (get<std::string>(d, "kind") == "csv") {
    CsvSpec spec;
    spec.path = get<std::string>(d, "path");
    spec.features = get<std::vector<std::string>>(d, "feature_columns");
    spec.target = get<std::string>(d, "target");
    spec.train_fraction = get<double>(d, "train_fraction");
    if (!d.at("split_index").is_null()) spec.split_index = get<Eigen::Index>(d, "split_index");
    spec.sg_derivative = get<bool>(d, "sg_derivative");
    spec.sg_window = get<int>(d, "sg_window");
    spec.sg_order = get<int>(d, "sg_order");
    return load_csv(spec);
  }
  SynthSpec s;
  s.generator = get<std::string>(d, "generator");
  const auto n_train = get<Eigen::Index>(d, "n_train"), n_test = get<Eigen::Index>(d, "n_test");
  if (n_train < 1 || n_test < 1) throw DataError(DataError::Kind::empty_split, "dataset: n_train and n_test must be positive");
  s.n = n_train + n_test;
  s.noise_scale = get<double>(d, "noise_scale");
  s.w_star = get<double>(d, "w_star");
  s.features = get<Eigen::Index>(d, "features");
  s.seed = d.at("seed").is_null() ? config.at("seed").get<std::uint64_t>() : d.at("seed").get<std::uint64_t>();
  const Dataset raw = synth_dataset(s);
  return temporal_split(raw.inputs, raw.targets, n_train, raw.noise_std);
}

std::string run_name(const json& config) {
  std::ostringstream os;
  const auto label = config.at("label").get<std::string>();
  if (!label.empty()) os << sanitize(label) << '-';
  os << config.at("method").get<std::string>() << "-n" << config.at("n_samples").get<long>() << "-s"
     << config.at("seed").get<std::uint64_t>();
  return os.str();
}

std::string fnv1a_hex(const std::string& bytes) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_name(bytes);
  return os.str();
}

namespace {

struct FitOutput {
  SampleBank bank;
  json fit = json::object();
  std::optional<TrainReport> train;
  std::optional<Checkpoint> checkpoint;
};

FitOutput fit_method(const json& cfg, const RegressionModel& model, const Dataset& train_set, std::ostream* log) {
  const auto method = get<std::string>(cfg, "method");
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const auto n = cfg.at("n_samples").get<Eigen::Index>();
  const double prior_var = cfg["model"]["prior_var"].get<double>();
  const json& m = cfg.at(method);
  FitOutput out;

  if (method == "diffuq") {
    SdeConfig sde;
    sde.gamma = get<double>(m, "gamma");
    sde.dt_train = get<double>(m, "dt_train");
    sde.dt_sample = get<double>(m, "dt_sample");
    sde.batch_n = get<Eigen::Index>(m, "batch_n");
    sde.seed = derive_seed(seed, "diffuq-train");
    sde.validate();
    OptimizerConfig opt;
    opt.max_iter = get<int>(m, "iterations");
    opt.lr = get<double>(m, "lr");
    opt.lr_final_fraction = get<double>(m, "lr_final_fraction");
    const PosteriorTarget target(model, train_set, get<Eigen::Index>(m, "minibatch"), prior_var);
    DriftNetwork drift = DriftNetwork::initialized(model.dim(), derive_seed(seed, "drift-init"),
                                                   get<Eigen::Index>(m, "width"), get<Eigen::Index>(m, "depth"));
    const int every = std::max(1, opt.max_iter / 10);
    TrainResult tr = train(std::move(drift), target, sde, opt, [&](const TrainRecord& r) {
      if (log && (r.iteration % every == 0 || r.iteration + 1 == opt.max_iter))
        *log << "  iter " << r.iteration << " loss " << r.total << " (running " << r.running << ", terminal "
             << r.terminal << ")\n";
    });
    out.bank.samples = sample(tr.drift, sde, n, derive_seed(seed, "diffuq-sample"));
    out.bank.method = "diffuq";
    const auto& last = tr.report.records.back();
    out.fit = {{"final_total", last.total}, {"final_running", last.running}, {"final_terminal", last.terminal},
               {"iterations", opt.max_iter}};
    out.train = std::move(tr.report);
    out.checkpoint = Checkpoint{std::move(tr.drift), sde};
  } else if (method == "map") {
    const MapResult r = map_fit(model, train_set, map_config(m), seed, get<Eigen::Index>(m, "minibatch"), prior_var);
    out.bank.samples = r.theta.transpose();
    out.bank.method = "map";
    out.fit = {{"log_posterior", r.log_density}, {"grad_norm", r.grad_norm}};
  } else if (method == "de") {
    if (n < 2) throw ConfigError("de needs n_samples >= 2 members");
    std::vector<std::uint64_t> seeds;
    for (Eigen::Index k = 0; k < n; ++k) seeds.push_back(derive_seed(seed, "de-member", static_cast<std::uint64_t>(k)));
    out.bank = ensemble_fit(model, train_set, seeds, map_config(m), get<Eigen::Index>(m, "minibatch"), prior_var);
  } else if (method == "mcdropout") {
    const auto* hetero = dynamic_cast<const HeteroModel*>(&model);
    if (!hetero) throw ConfigError("mcdropout needs a pensim or hlt model");
    const double rate = get<double>(m, "rate");
    const Eigen::VectorXd fitted =
        mc_dropout_fit(*hetero, train_set, rate, map_config(m), seed, get<Eigen::Index>(m, "minibatch"), prior_var);
    out.bank = mc_dropout_bank(*hetero, fitted, rate, n, seed);
  } else if (method == "mfvi") {
    MfviConfig c;
    c.opt.max_iter = get<int>(m, "iterations");
    c.opt.lr = get<double>(m, "lr");
    c.opt.lr_final_fraction = get<double>(m, "lr_final_fraction");
    c.init_log_std = get<double>(m, "init_log_std");
    const PosteriorTarget target(model, train_set, get<Eigen::Index>(m, "minibatch"), prior_var);
    RandomStream init = derive_stream(seed, "init");
    const MfviResult r = mfvi_fit(target, model.init_params(init), c, seed);
    out.bank = r.sample(n, seed);
  } else if (method == "sgld") {
    SgldConfig c;
    c.step_size = get<double>(m, "step_size");
    c.n_steps = get<int>(m, "n_steps");
    c.burn_in = get<double>(m, "burn_in");
    c.n_chains = get<Eigen::Index>(m, "n_chains");
    c.n_samples = n;
    const PosteriorTarget target(model, train_set, get<Eigen::Index>(m, "minibatch"), prior_var);
    RandomStream init = derive_stream(seed, "init");
    out.bank = sgld_sample(target, model.init_params(init), c, seed);
  } else {
    SvgdConfig c;
    c.n_particles = n;
    c.n_steps = get<int>(m, "n_steps");
    c.step = get<double>(m, "step");
    if (!m.at("bandwidth").is_null()) c.bandwidth = m.at("bandwidth").get<double>();
    const PosteriorTarget target(model, train_set, get<Eigen::Index>(m, "minibatch"), prior_var);
    out.bank = svgd_run(target, c, seed);
  }
  out.bank.provenance["seed"] = seed;
  out.bank.provenance["method"] = method;
  out.bank.validate();
  return out;
}

}  // namespace

RunArtifact run_experiment(const json& config, const RunOptions& opts) {
  const json cfg = resolve_config(config);
  const fs::path root = cfg.at("output_dir").get<std::string>();
  const std::string name = run_name(cfg);
  const fs::path final_dir = root / name;
  if (fs::exists(final_dir) && !opts.overwrite)
    throw ConfigError("run directory " + final_dir.string() + " already exists");

  if (opts.log) *opts.log << "[" << name << "] loading data\n";
  const Split split = make_split(cfg);
  const auto model = make_model(cfg, split.train.features());
  if (opts.log) *opts.log << "[" << name << "] fitting " << cfg["method"].get<std::string>() << " (d = " << model->dim() << ")\n";
  FitOutput fit = fit_method(cfg, *model, split.train, opts.log);
  const CalibrationReport rep = evaluate(fit.bank, *model, split.test, cfg["metrics"]["bins"].get<int>());

  json snapshot = cfg;
  snapshot.erase("output_dir");
  json report;
  report["config"] = snapshot;
  report["method"] = cfg["method"];
  report["label"] = cfg["label"];
  report["seed"] = cfg["seed"];
  report["n_samples"] = fit.bank.size();
  report["model_dim"] = model->dim();
  report["n_train"] = split.train.size();
  report["n_test"] = split.test.size();
  report["metrics"] = rep.to_json();
  report["fit"] = fit.fit;
  if (const auto* h = dynamic_cast<const HeteroModel*>(model.get())) report["clamp_events"] = h->clamp_events();

  fs::create_directories(root);
  const fs::path tmp = root / (".tmp-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    std::map<std::string, std::string> files;
    files["config.json"] = cfg.dump(2) + "\n";
    files["report.json"] = report.dump(2) + "\n";
    files["reliability.csv"] = rep.reliability_csv();
    for (const auto& [f, content] : files) write_file(tmp / f, content);
    fit.bank.save(tmp / "samples.csv");
    files["samples.csv"] = read_file(tmp / "samples.csv");
    files["samples.csv.json"] = read_file(tmp / "samples.csv.json");
    if (fit.train) {
      std::ostringstream os;
      fit.train->write_csv(os);
      files["train_report.csv"] = os.str();
      write_file(tmp / "train_report.csv", os.str());
    }
    if (fit.checkpoint) {
      const auto fmt = checkpoint_format_from_string(cfg["diffuq"]["checkpoint_format"].get<std::string>());
      const std::string fname = fmt == CheckpointFormat::json ? "checkpoint.json" : "checkpoint.bin";
      save_checkpoint(tmp / fname, *fit.checkpoint, fmt);
      files[fname] = read_file(tmp / fname);
    }
    json manifest;
    manifest["seed"] = cfg["seed"];
    manifest["run"] = name;
    for (const auto& [f, content] : files) manifest["files"][f] = {{"fnv1a64", fnv1a_hex(content)}, {"bytes", content.size()}};
    write_file(tmp / "manifest.json", manifest.dump(2) + "\n");
    if (fs::exists(final_dir)) fs::remove_all(final_dir);
    fs::rename(tmp, final_dir);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
  if (opts.log) *opts.log << "[" << name << "] ece " << rep.ece << " nll " << rep.nll << " -> " << final_dir.string() << "\n";
  return {final_dir, report};
}

std::vector<RunArtifact> sweep(const json& config, const std::vector<std::string>& grid, const RunOptions& opts) {
  if (grid.empty()) throw ConfigError("sweep: no --grid entries");
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& g : grid) {
    const auto eq = g.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == g.size()) throw ConfigError("grid entry '" + g + "' is not key=v1,v2");
    std::vector<std::string> vals;
    std::istringstream vs(g.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) vals.push_back(v);
    axes.emplace_back(g.substr(0, eq), vals);
  }
  // validate every point before running any
  std::vector<json> points;
  std::vector<std::vector<std::string>> point_values;
  std::vector<std::size_t> idx(axes.size(), 0);
  for (;;) {
    json c = config;
    std::string label = c.value("label", std::string());
    std::vector<std::string> vals;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const auto& v = axes[a].second[idx[a]];
      apply_override(c, axes[a].first + "=" + v);
      label += (label.empty() ? "" : ",") + axes[a].first + "=" + v;
      vals.push_back(v);
    }
    c["label"] = label;
    resolve_config(c);
    points.push_back(c);
    point_values.push_back(vals);
    std::size_t a = 0;
    for (; a < axes.size(); ++a) {
      if (++idx[a] < axes[a].second.size()) break;
      idx[a] = 0;
    }
    if (a == axes.size()) break;
  }
  std::vector<RunArtifact> out;
  std::ostringstream csv;
  csv << std::setprecision(17) << "run";
  for (const auto& ax : axes) csv << ',' << ax.first;
  csv << ",method,n_samples,seed,nll,ece,mce,mse,mae,r2\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    out.push_back(run_experiment(points[i], opts));
    const json& r = out.back().report;
    const json& mt = r["metrics"];
    csv << out.back().dir.filename().string();
    for (const auto& v : point_values[i]) csv << ',' << v;
    csv << ',' << r["method"].get<std::string>() << ',' << r["n_samples"].get<long>() << ','
        << r["seed"].get<std::uint64_t>() << ',' << mt["nll"].get<double>() << ',' << mt["ece"].get<double>() << ','
        << mt["mce"].get<double>() << ',' << mt["mse"].get<double>() << ',' << mt["mae"].get<double>() << ',';
    if (!mt["r2"].is_null()) csv << mt["r2"].get<double>();
    csv << '\n';
  }
  const fs::path root = resolve_config(config).at("output_dir").get<std::string>();
  write_file(root / "sweep_summary.csv", csv.str());
  return out;
}

namespace {

void collect_reports(const fs::path& p, std::vector<fs::path>& out) {
  if (fs::is_regular_file(p / "report.json")) {
    out.push_back(p / "report.json");
    return;
  }
  if (!fs::is_directory(p)) throw DataError(DataError::Kind::io, "no run directory at " + p.string());
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_directory() && fs::is_regular_file(e.path() / "report.json")) subs.push_back(e.path() / "report.json");
  if (subs.empty()) throw DataError(DataError::Kind::io, "no report.json under " + p.string());
  std::sort(subs.begin(), subs.end());
  out.insert(out.end(), subs.begin(), subs.end());
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

std::vector<SummaryRow> summarize(const std::vector<fs::path>& inputs) {
  if (inputs.empty()) throw ConfigError("report: no artifacts given");
  std::vector<fs::path> files;
  for (const auto& p : inputs) collect_reports(p, files);
  std::map<std::tuple<std::string, long, std::string>, std::vector<json>> groups;
  std::optional<json> dataset;
  for (const auto& f : files) {
    json r = json::parse(read_file(f));
    const json& ds = r.at("config").at("dataset");
    if (!dataset) dataset = ds;
    else if (*dataset != ds) throw ConfigError("report: runs use different dataset specs (" + f.string() + ")");
    groups[{r.at("method").get<std::string>(), r.at("n_samples").get<long>(), r.at("label").get<std::string>()}]
        .push_back(std::move(r));
  }
  std::vector<SummaryRow> rows;
  static const char* metrics[] = {"nll", "ece", "mce", "mse", "mae", "r2"};
  for (const auto& [key, runs] : groups) {
    SummaryRow row;
    std::tie(row.method, row.n_samples, row.label) = key;
    row.runs = static_cast<int>(runs.size());
    for (const char* m : metrics) {
      std::vector<double> v;
      bool defined = true;
      for (const auto& r : runs) {
        const json& x = r["metrics"][m];
        if (x.is_null()) defined = false;
        else v.push_back(x.get<double>());
      }
      if (defined) row.stats.emplace_back(m, mean_std(v));
    }
    const auto levels = runs.front()["metrics"]["levels"].get<std::vector<double>>();
    row.levels = levels;
    row.mean_coverage.assign(levels.size(), 0.0);
    for (const auto& r : runs) {
      const auto c = r["metrics"]["coverages"].get<std::vector<double>>();
      if (c.size() != levels.size()) throw ConfigError("report: runs in one group use different bin counts");
      for (std::size_t k = 0; k < c.size(); ++k) row.mean_coverage[k] += c[k] / static_cast<double>(runs.size());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<SummaryRow> emit_report(const std::vector<fs::path>& inputs, const fs::path& out_dir) {
  auto rows = summarize(inputs);
  fs::create_directories(out_dir);
  std::ostringstream csv;
  csv << std::setprecision(17) << "method,n_samples,label,runs";
  static const char* metrics[] = {"nll", "ece", "mce", "mse", "mae", "r2"};
  for (const char* m : metrics) csv << ',' << m << "_mean," << m << "_std";
  csv << '\n';
  for (const auto& row : rows) {
    csv << row.method << ',' << row.n_samples << ",\"" << row.label << "\"," << row.runs;
    for (const char* m : metrics) {
      const auto it = std::find_if(row.stats.begin(), row.stats.end(), [&](const auto& s) { return s.first == m; });
      if (it == row.stats.end()) csv << ",,";
      else csv << ',' << it->second.first << ',' << it->second.second;
    }
    csv << '\n';
    std::ostringstream rel;
    rel << std::setprecision(17) << "nominal,empirical\n";
    for (std::size_t k = 0; k < row.levels.size(); ++k) rel << row.levels[k] << ',' << row.mean_coverage[k] << '\n';
    std::string tag = row.method + "_n" + std::to_string(row.n_samples);
    if (!row.label.empty()) tag += "_" + sanitize(row.label);
    write_file(out_dir / ("reliability_" + tag + ".csv"), rel.str());
  }
  write_file(out_dir / "summary.csv", csv.str());
  return rows;
}

// --- selftest ---------------------------------------------------------------------------

bool selftest(std::ostream& os) {
  bool all = true;
  auto check = [&](const char* name, bool ok, double value) {
    os << (ok ? "[PASS] " : "[FAIL] ") << name << " (" << std::setprecision(10) << value << ")\n";
    all = all && ok;
  };
  {
    const double g = nn::gelu(1.0);
    check("gelu(1) = Phi(1)", std::abs(g - 0.5 * std::erfc(-1.0 / std::sqrt(2.0))) < 1e-12 && std::abs(g - 0.841345) < 1e-6, g);
  }
  {
    const Eigen::Vector3d x(0.0, 1.0, 2.0);
    const Eigen::VectorXd y = nn::layer_norm(x);
    const double expect = -1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
    check("layer_norm([0,1,2])[0]", std::abs(y[0] - expect) < 1e-12, y[0]);
  }
  {
    const double v = gaussian_logp(Eigen::Vector2d::Zero(), Eigen::Vector2d::Ones(), Eigen::Vector2d::Zero());
    check("gaussian_logp(0; 0, I_2) = -log 2pi", std::abs(v + std::log(2.0 * M_PI)) < 1e-12, v);
  }
  {
    const auto post = conjugate_linear_posterior(Eigen::MatrixXd::Ones(1, 1), Eigen::VectorXd::Ones(1), 1.0, 1.0);
    check("conjugate posterior 1-D", std::abs(post.mean[0] - 0.5) < 1e-12 && std::abs(post.cov(0, 0) - 0.5) < 1e-12,
          post.mean[0]);
  }
  {
    const PredictiveDistribution p{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1)};
    const double q = quantile(p, 0.975);
    check("quantile N(0,1) at 0.975", std::abs(q - 1.959964) < 1e-6, q);
  }
  {
    const EceMce e = ece_mce(Eigen::Vector3d(0.25, 0.5, 0.75), Eigen::Vector3d(0.25, 0.6, 0.75));
    check("ece/mce hand example", std::abs(e.ece - 0.1 / 3.0) < 1e-12 && std::abs(e.mce - 0.1) < 1e-12, e.ece);
  }
  {
    const RegressionScores s = regression_scores(Eigen::Vector2d(1.0, 2.0), Eigen::Vector2d(0.0, 4.0));
    check("regression scores hand example",
          std::abs(s.mse - 2.5) < 1e-12 && std::abs(s.mae - 1.5) < 1e-12 && s.r2 && std::abs(*s.r2 - 0.375) < 1e-12,
          s.mse);
  }
  {
    Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(40, 0.0, 39.0);
    const Eigen::VectorXd y = (0.3 * t.array().square() - 2.0 * t.array() + 1.0).matrix();
    const Eigen::VectorXd dy = savitzky_golay_deriv(y);
    check("savitzky-golay derivative of a quadratic", std::abs(dy[20] - (0.6 * 20 - 2.0)) < 1e-10, dy[20]);
  }
  {
    const Eigen::Vector2d at(3.0, -4.0);
    const Eigen::VectorXd g = ad::gradient_of(
        [](ad::Tape&, const ad::Var& th) { return ad::scale(ad::sum(ad::square(th)), 0.5); }, at);
    check("reverse-mode gradient of |theta|^2 / 2", (g - at).norm() < 1e-12, g[0]);
  }
  {
    const auto b = simulate([](double, const Eigen::MatrixXd& x) { return Eigen::MatrixXd::Zero(x.rows(), x.cols()); },
                            1, 1.0, RolloutSpec{4000, 0.01, 7, 0});
    const double v = (b.terminal_states.array() - b.terminal_states.mean()).square().mean();
    check("zero-control terminal variance ~ gamma", std::abs(v - 1.0) < 0.1, v);
  }
  return all;
}

}  // namespace diffuq
