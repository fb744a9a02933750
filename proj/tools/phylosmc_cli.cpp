// phylosmc: command-line driver for the samplers, training and the oracle.
#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <json.hpp>

#include "phylosmc/phylosmc.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace phylosmc;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kBadFlags = 2, kBadInput = 3, kNumeric = 4 };

// Input problems that are not parse errors (missing file, size guard, ...).
struct InputProblem : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

std::string utc_now() { return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::time(nullptr))); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputProblem(fmt::format("cannot read '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

json number(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

json to_json(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(number(x));
  return a;
}

// Options shared by infer and train.
struct CommonOptions {
  std::string input;
  std::string out = "run";
  std::size_t particles = 16;
  std::size_t subsamples = 1;
  std::string model = "jc69";
  std::string params_file;
  std::uint64_t seed = 1;
  double lambda_bl = 10.0;
  unsigned threads = 0;

  unsigned resolved_threads() const { return threads > 0 ? threads : default_thread_count(); }
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--input", o.input, "aligned sequences (FASTA, PHYLIP or NEXUS)")->required();
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
  cmd->add_option("--particles", o.particles, "number of particles K")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--subsamples", o.subsamples, "branch samples per candidate pair M (NCSMC)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--model", o.model, "substitution model")->capture_default_str()->check(CLI::IsMember({"jc69", "gtr"}));
  cmd->add_option("--params", o.params_file, "params.json with model (and optional proposal) parameters");
  cmd->add_option("--seed", o.seed, "random seed")->capture_default_str();
  cmd->add_option("--lambda-bl", o.lambda_bl, "rate of the exponential branch-length prior")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--threads", o.threads, "worker threads (default: PHYLO_THREADS or 1)");
}

struct LoadedInput {
  Alignment aln;
  std::string digest;
};

LoadedInput load_input(const std::string& path) {
  std::string bytes = slurp(path);
  return {parse_alignment(bytes), sha256_hex(bytes)};
}

struct LoadedParams {
  RateModel model = RateModel::jc69();
  std::optional<std::vector<double>> log_rate;
};

LoadedParams load_params(const CommonOptions& o) {
  LoadedParams p;
  if (o.params_file.empty()) {
    p.model = build_model(model_kind_from_string(o.model));
    return p;
  }
  std::string text = slurp(o.params_file);
  try {
    p.model = from_params_json(text);
    auto j = json::parse(text);
    if (j.contains("log_rate")) p.log_rate = j["log_rate"].get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw InputProblem(fmt::format("{}: {}", o.params_file, e.what()));
  }
  return p;
}

json manifest(const std::string& command, const json& config, const std::string& input, const std::string& digest,
              std::uint64_t seed, const std::string& started) {
  json m;
  m["command"] = command;
  m["config"] = config;
  m["input"] = {{"path", input}, {"sha256", digest}};
  m["seed"] = seed;
  m["version"] = kVersion;
  m["started"] = started;
  m["finished"] = nullptr;
  return m;
}

void finish_manifest(const fs::path& dir, json m) {
  m["finished"] = utc_now();
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

json rank_record(const RankRecord& r, Method method) {
  json j;
  j["rank"] = r.rank;
  j["log_avg_weight"] = number(r.log_avg_weight);
  j["ess"] = number(r.ess);
  j["likelihood_evaluations"] = r.likelihood_evaluations;
  if (method == Method::ncsmc) {
    j["L"] = r.lookahead_pairs;
    j["M"] = r.subsamples;
    j["max_log_potential"] = number(r.max_log_potential);
  }
  return j;
}

std::string params_json(const RateModel& model, const ProposalParams& proposal) {
  json j = json::parse(to_params_json(model));
  j["log_rate"] = to_json(proposal.log_rate);
  j["lambda_bl"] = proposal.lambda_bl;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

struct InferOptions {
  CommonOptions common;
  std::string method = "csmc";
};

int run_infer(const InferOptions& o) {
  const auto clock_start = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  LoadedInput in = load_input(o.common.input);
  LoadedParams lp = load_params(o.common);
  const Method method = o.method == "csmc" ? Method::csmc : Method::ncsmc;
  const int ranks = static_cast<int>(in.aln.taxon_count()) - 1;
  ProposalParams proposal = ProposalParams::with_prior_rate(o.common.lambda_bl);
  if (lp.log_rate) proposal.log_rate = *lp.log_rate;
  proposal.validate(ranks);

  json config;
  config["method"] = o.method;
  config["particles"] = o.common.particles;
  config["subsamples"] = method == Method::ncsmc ? o.common.subsamples : 1;
  config["model"] = to_string(lp.model.kind());
  config["theta"] = to_json(lp.model.theta());
  config["lambda_bl"] = o.common.lambda_bl;
  config["log_rate"] = to_json(proposal.log_rate);
  config["threads"] = o.common.resolved_threads();
  config["params_file"] = o.common.params_file;

  fs::path dir(o.common.out);
  fs::create_directories(dir);
  json man = manifest("infer", config, o.common.input, in.digest, o.common.seed, started);
  write_text(dir / "manifest.json", man.dump(2) + "\n");

  SweepConfig sc;
  sc.method = method;
  sc.particles = o.common.particles;
  sc.subsamples = o.common.subsamples;
  sc.seed = o.common.seed;
  sc.threads = o.common.resolved_threads();
  SweepResult res = detail::sweep(in.aln, lp.model, proposal, sc);

  std::string metrics;
  json ess_by_rank = json::array();
  for (const auto& r : res.system.records) {
    metrics += rank_record(r, method).dump() + "\n";
    ess_by_rank.push_back(number(r.ess));
  }
  write_text(dir / "metrics.jsonl", metrics);
  write_text(dir / "trees.nwk", to_newick(res.system.best_tree(), in.aln.taxa()) + "\n");
  json summary;
  summary["log_Zhat"] = number(res.log_Zhat);
  summary["ranks"] = res.system.records.size();
  summary["ess_by_rank"] = ess_by_rank;
  summary["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  finish_manifest(dir, man);
  fmt::print("log_Zhat {:.10g}\n", res.log_Zhat);
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
  CommonOptions common;
  std::string objective = "vcsmc";
  int epochs = 100;
  double lr = 1e-3;
  double batch_frac = 0.25;
  std::string estimator = "drop";
  double gs_temp = 0.5;
  bool learn_model = false;
  bool fixed_branch_rate = false;
  bool per_rank_rate = false;
  int params_every = 0;
};

int run_train(const TrainOptions& o) {
  const auto clock_start = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  LoadedInput in = load_input(o.common.input);
  if (!o.common.params_file.empty())
    throw std::invalid_argument("train starts from default parameters; --params is only used by infer");

  TrainConfig cfg;
  cfg.objective = o.objective == "vcsmc" ? Objective::vcsmc : Objective::vncsmc;
  cfg.particles = o.common.particles;
  cfg.subsamples = o.common.subsamples;
  cfg.epochs = o.epochs;
  cfg.learning_rate = o.lr;
  cfg.batch_fraction = o.batch_frac;
  cfg.gumbel_temperature = o.gs_temp;
  cfg.estimator = o.estimator == "drop" ? DiscreteEstimator::drop_discrete : DiscreteEstimator::gumbel_softmax;
  cfg.seed = o.common.seed;
  cfg.lambda_bl = o.common.lambda_bl;
  cfg.model = model_kind_from_string(o.common.model);
  cfg.learn_model = o.learn_model;
  cfg.learn_branch_rate = !o.fixed_branch_rate;
  cfg.per_rank_rate = o.per_rank_rate;
  cfg.threads = o.common.resolved_threads();
  cfg.validate();

  const std::size_t S = in.aln.site_count();
  json config;
  config["objective"] = o.objective;
  config["particles"] = cfg.particles;
  config["subsamples"] = cfg.objective == Objective::vncsmc ? cfg.subsamples : 1;
  config["epochs"] = cfg.epochs;
  config["learning_rate"] = cfg.learning_rate;
  config["batch_fraction"] = cfg.batch_fraction;
  config["batch_size"] = draw_minibatch(S, cfg.batch_fraction, CounterRng(cfg.seed), 0).size();
  config["estimator"] = to_string(cfg.estimator);
  config["gumbel_temperature"] = cfg.gumbel_temperature;
  config["model"] = to_string(cfg.model);
  config["lambda_bl"] = cfg.lambda_bl;
  config["learn_model"] = cfg.learn_model;
  config["learn_branch_rate"] = cfg.learn_branch_rate;
  config["per_rank_rate"] = cfg.per_rank_rate;
  config["params_every"] = o.params_every;
  config["threads"] = cfg.threads;

  fs::path dir(o.common.out);
  fs::create_directories(dir);
  json man = manifest("train", config, o.common.input, in.digest, cfg.seed, started);
  write_text(dir / "manifest.json", man.dump(2) + "\n");

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  std::ofstream timing(dir / "timing.jsonl", std::ios::binary);
  auto on_epoch = [&](const EpochRecord& r, const ParameterSet& ps) {
    json j;
    j["epoch"] = r.epoch;
    j["elbo_estimate"] = number(r.elbo_estimate);
    j["full_data_loglik_estimate"] = number(r.full_data_loglik_estimate);
    j["ess_min"] = number(r.ess_min);
    j["ess_mean"] = number(r.ess_mean);
    j["theta"] = to_json(r.theta);
    j["log_rate"] = to_json(r.log_rate);
    metrics << j.dump() << "\n" << std::flush;
    timing << json{{"epoch", r.epoch}, {"wall_seconds", r.wall_seconds}}.dump() << "\n" << std::flush;
    if (o.params_every > 0 && r.epoch % o.params_every == 0)
      write_text(dir / fmt::format("params_epoch_{:04d}.json", r.epoch), params_json(ps.model(), ps.proposal));
  };
  TrainResult res = train(in.aln, cfg, on_epoch);

  write_text(dir / "trees.nwk", to_newick(res.best_tree, in.aln.taxa()) + "\n");
  write_text(dir / "params.json", params_json(res.model, res.proposal));
  json summary;
  summary["epochs"] = res.trace.size();
  summary["final_elbo_estimate"] = number(res.trace.back().elbo_estimate);
  summary["final_full_data_loglik_estimate"] = number(res.trace.back().full_data_loglik_estimate);
  json ess_by_rank = json::array();
  for (const auto& r : res.final_records) ess_by_rank.push_back(number(r.ess));
  summary["ess_by_rank"] = ess_by_rank;
  summary["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  finish_manifest(dir, man);
  fmt::print("final elbo {:.10g}\n", res.trace.back().elbo_estimate);
  return kOk;
}

// ---------------------------------------------------------------------------

struct OracleOptions {
  std::string input;
  std::string grid;
  std::size_t reps = 10000;
  std::size_t csmc_particles = 16;
  std::size_t ncsmc_particles = 8;
  std::size_t subsamples = 2;
  std::string model = "jc69";
  double lambda_bl = 10.0;
  std::uint64_t seed = 1;
  unsigned threads = 0;
};

struct SamplerCheck {
  double mean = 0.0, standard_error = 0.0, z = 0.0;
};

int run_oracle(const OracleOptions& o) {
  LoadedInput in = load_input(o.input);
  GridSpec grid = parse_grid(o.grid);
  RateModel model = build_model(model_kind_from_string(o.model));
  double exact = 0.0;
  try {
    exact = oracle::exact_log_Z_grid(in.aln, model, grid, o.lambda_bl);
  } catch (const oracle::SizeGuardError& e) {
    throw InputProblem(e.what());
  }
  const double relative = exact - oracle::leaf_log_likelihood_total(in.aln, model);
  ProposalParams proposal = ProposalParams::with_prior_rate(o.lambda_bl);
  proposal.grid = grid;
  const unsigned threads = o.threads > 0 ? o.threads : default_thread_count();

  auto check = [&](Method method, std::size_t K) {
    std::vector<double> ratio(o.reps);
    parallel_for(o.reps, threads, [&](std::size_t rep) {
      SweepConfig sc;
      sc.method = method;
      sc.particles = K;
      sc.subsamples = o.subsamples;
      sc.seed = o.seed;
      sc.step = rep;
      ratio[rep] = std::exp(detail::sweep(in.aln, model, proposal, sc).log_Zhat - relative);
    });
    SamplerCheck c;
    double sum = 0.0, sum_sq = 0.0;
    for (double r : ratio) sum += r, sum_sq += r * r;
    const double n = static_cast<double>(o.reps);
    c.mean = sum / n;
    c.standard_error = std::sqrt(std::max(0.0, (sum_sq - n * c.mean * c.mean) / (n - 1.0)) / n);
    c.z = c.standard_error > 0 ? (c.mean - 1.0) / c.standard_error : (c.mean == 1.0 ? 0.0 : INFINITY);
    return c;
  };
  // Zhat estimates Z relative to the all-singletons forest.
  fmt::print("exact log Z          {:.10g}\n", exact);
  fmt::print("exact log Z / pi0    {:.10g}\n", relative);
  bool ok = true;
  for (auto [name, method, K] : {std::tuple{"csmc", Method::csmc, o.csmc_particles},
                                 std::tuple{"ncsmc", Method::ncsmc, o.ncsmc_particles}}) {
    SamplerCheck c = check(method, K);
    fmt::print("{:<6} K={:<3} mean Zhat/Z {:.6f}  stderr {:.6f}  log mean Zhat {:.10g}  z {:+.3f}\n", name, K, c.mean,
               c.standard_error, std::log(c.mean) + relative, c.z);
    ok = ok && std::abs(c.z) < 3.0;
  }
  fmt::print("{}\n", ok ? "PASS" : "FAIL");
  return ok ? kOk : kFailure;
}

// ---------------------------------------------------------------------------

std::string csv_field(const json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + csv_field(v[i]);
    return s;
  }
  return v.dump();
}

int run_report(const std::string& run_dir, const std::string& out_path) {
  fs::path src = fs::path(run_dir) / "metrics.jsonl";
  std::ifstream in(src);
  if (!in) throw InputProblem(fmt::format("cannot read '{}'", src.string()));
  std::vector<json> rows;
  std::vector<std::string> columns;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InputProblem(fmt::format("{} line {}: {}", src.string(), line_no, e.what()));
    }
    for (auto it = j.begin(); it != j.end(); ++it)
      if (std::find(columns.begin(), columns.end(), it.key()) == columns.end()) columns.push_back(it.key());
    rows.push_back(std::move(j));
  }
  std::string csv;
  for (std::size_t c = 0; c < columns.size(); ++c) csv += (c ? "," : "") + columns[c];
  csv += "\n";
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      csv += c ? "," : "";
      if (r.contains(columns[c])) csv += csv_field(r[columns[c]]);
    }
    csv += "\n";
  }
  if (out_path.empty() || out_path == "-")
    std::cout << csv;
  else
    write_text(out_path, csv);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Combinatorial and nested-combinatorial SMC for phylogenetics"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  InferOptions infer;
  auto* infer_cmd = app.add_subcommand("infer", "run one CSMC or NCSMC sweep");
  add_common(infer_cmd, infer.common);
  infer_cmd->add_option("--method", infer.method, "sampler")->capture_default_str()->check(CLI::IsMember({"csmc", "ncsmc"}));

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "fit model and proposal parameters by maximizing log Zhat");
  add_common(train_cmd, tr.common);
  train_cmd->add_option("--objective", tr.objective)->capture_default_str()->check(CLI::IsMember({"vcsmc", "vncsmc"}));
  train_cmd->add_option("--epochs", tr.epochs)->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch-frac", tr.batch_frac, "fraction of sites per step")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--estimator", tr.estimator)->capture_default_str()->check(CLI::IsMember({"drop", "gumbel"}));
  train_cmd->add_option("--gs-temp", tr.gs_temp, "Gumbel-softmax temperature")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train_cmd->add_flag("--learn-model", tr.learn_model, "learn GTR parameters");
  train_cmd->add_flag("--fixed-branch-rate", tr.fixed_branch_rate, "keep the branch proposal rate fixed");
  train_cmd->add_flag("--per-rank-rate", tr.per_rank_rate, "one branch proposal rate per rank");
  train_cmd->add_option("--params-every", tr.params_every, "write params snapshots every N epochs (0: never)")
      ->capture_default_str();

  OracleOptions orc;
  auto* oracle_cmd = app.add_subcommand("oracle", "compare sampler estimates with the exact grid normalizer");
  oracle_cmd->add_option("--input", orc.input)->required();
  oracle_cmd->add_option("--grid", orc.grid, "branch-length grid \"v1:p1,v2:p2,...\"")->required();
  oracle_cmd->add_option("--reps", orc.reps)->capture_default_str()->check(CLI::Range(std::size_t{2}, std::size_t{1} << 40));
  oracle_cmd->add_option("--particles", orc.csmc_particles, "CSMC particles")->capture_default_str()->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--ncsmc-particles", orc.ncsmc_particles)->capture_default_str()->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--subsamples", orc.subsamples)->capture_default_str()->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--model", orc.model)->capture_default_str()->check(CLI::IsMember({"jc69", "gtr"}));
  oracle_cmd->add_option("--lambda-bl", orc.lambda_bl)->capture_default_str()->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--seed", orc.seed)->capture_default_str();
  oracle_cmd->add_option("--threads", orc.threads);

  std::string report_dir, report_out;
  auto* report_cmd = app.add_subcommand("report", "convert a run's metrics.jsonl to CSV");
  report_cmd->add_option("--run", report_dir, "run directory")->required();
  report_cmd->add_option("--out", report_out, "CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadFlags;
  }

  try {
    if (*infer_cmd) return run_infer(infer);
    if (*train_cmd) return run_train(tr);
    if (*oracle_cmd) return run_oracle(orc);
    if (*report_cmd) return run_report(report_dir, report_out);
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kBadInput;
  } catch (const NewickError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kBadInput;
  } catch (const InputProblem& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kBadInput;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadFlags;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
