#include "cli.hpp"

#include "it3d/config_json.hpp"
#include "it3d/evalkit.hpp"
#include "it3d/image_io.hpp"
#include "it3d/pipeline_checks.hpp"
#include "it3d/remote.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>
#include <toml.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <regex>
#include <sstream>

namespace it3d::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Errors that map onto exit codes.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw MissingInput("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  f << bytes;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::vector<PromptRecord> load_dataset(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput("dataset not found: " + p.string());
  return load_prompts(p);
}

TrainState load_state(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput("checkpoint not found: " + p.string());
  return load_checkpoint(p);
}

// Oracle, text encoder and feature space for one invocation.
class Services {
 public:
  Services(const std::string& oracle_flag, const ModelConfig& model, Index render_hw) {
    if (oracle_flag == "synthetic") {
      synthetic_ = std::make_unique<SyntheticOracle>(schedule_);
      text_ = std::make_unique<SyntheticTextEncoder>(embedder_for(model));
      features_ = std::make_unique<DownsampleFeature>(std::gcd(render_hw, Index{16}));
      return;
    }
    std::string url;
    try {
      url = resolve_remote_url(oracle_flag);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    RemoteConfig cfg;
    cfg.url = url;
    client_ = std::make_unique<RemoteClient>(cfg);
    remote_ = std::make_unique<RemoteOracle>(*client_);
    remote_text_ = std::make_unique<RemoteTextEncoder>(*client_, model.decoder.token_count, model.decoder.token_dim);
    features_ = std::make_unique<RemoteImageEncoder>(*client_);
  }

  ScoreOracle& oracle() { return synthetic_ ? static_cast<ScoreOracle&>(*synthetic_) : *remote_; }
  TextEncoder& text() { return text_ ? static_cast<TextEncoder&>(*text_) : *remote_text_; }
  FeatureOracle& features() { return *features_; }
  const SyntheticOracle* synthetic() const { return synthetic_.get(); }
  RemoteClient* client() { return client_.get(); }
  RemoteTextEncoder* remote_text() { return remote_text_.get(); }
  const DiffusionSchedule& schedule() const { return schedule_; }

 private:
  DiffusionSchedule schedule_ = DiffusionSchedule::linear();
  std::unique_ptr<SyntheticOracle> synthetic_;
  std::unique_ptr<SyntheticTextEncoder> text_;
  std::unique_ptr<RemoteClient> client_;
  std::unique_ptr<RemoteOracle> remote_;
  std::unique_ptr<RemoteTextEncoder> remote_text_;
  std::unique_ptr<FeatureOracle> features_;
};

// ---- gen-prompts ----

struct GenArgs {
  std::string set;
  std::uint64_t seed = 0;
  double train_frac = 0.6;
  std::string out;
};

int gen_prompts(const GenArgs& a, std::ostream& err) {
  std::vector<PromptRecord> recs;
  if (a.set == "animals") recs = gen_animals();
  if (a.set == "portraits") recs = gen_portraits();
  if (a.set == "desk") recs = gen_desk_animals();
  recs = split(std::move(recs), a.train_frac, a.seed);
  save_prompts(a.out, recs);
  const auto n_train = std::count_if(recs.begin(), recs.end(), [](const auto& r) { return r.split == Split::kTrain; });
  err << "wrote " << recs.size() << " prompts (" << n_train << " train) to " << a.out << "\n";
  return kOk;
}

// ---- train ----

struct TrainArgs {
  std::string data, oracle = "synthetic", out, resume, config;
  std::optional<Index> steps, batch, render_hw, threads, every;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  bool plain_sigmoid = false;
  Index log_every = 50;
};

// TOML file with optional [model] and [train] tables in the checkpoint's JSON layout.
void apply_config_file(const fs::path& path, ModelConfig& model, TrainConfig& train) {
  if (!fs::exists(path)) throw MissingInput("config not found: " + path.string());
  toml::table tbl;
  try {
    tbl = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    throw UsageError(path.string() + ": " + std::string(e.description()));
  }
  std::ostringstream ss;
  ss << toml::json_formatter{tbl};
  const json j = json::parse(ss.str());
  for (const auto& [key, value] : j.items()) {
    if (key != "model" && key != "train") throw UsageError(path.string() + ": unknown table [" + key + "]");
  }
  try {
    // Merge over the current values so missing keys keep their defaults.
    if (j.contains("model")) {
      json m = model;
      m.merge_patch(j["model"]);
      model = m.get<ModelConfig>();
    }
    if (j.contains("train")) {
      json t = train;
      t.merge_patch(j["train"]);
      train = t.get<TrainConfig>();
    }
  } catch (const std::invalid_argument& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

fs::path checkpoint_path(const fs::path& dir, Index step) { return dir / ("ckpt_" + std::to_string(step)); }

int train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const auto records = load_dataset(a.data);
  std::vector<const PromptRecord*> train_set;
  for (const auto& r : records) {
    if (r.split == Split::kTrain) train_set.push_back(&r);
  }
  if (train_set.empty()) throw UsageError(a.data + " has no training prompts");

  TrainState st;
  if (!a.resume.empty()) {
    st = load_state(a.resume);
    if (st.cache.capacity() != train_set.size()) {
      throw UsageError("checkpoint was trained on " + std::to_string(st.cache.capacity()) + " prompts, " + a.data +
                       " has " + std::to_string(train_set.size()));
    }
    if (a.steps) st.train.total_steps = *a.steps;
    if (a.batch || a.lr || a.seed || a.render_hw || !a.config.empty() || a.plain_sigmoid) {
      err << "note: --resume keeps the checkpoint's configuration; only --steps is applied\n";
    }
  } else {
    ModelConfig model;
    TrainConfig tc;
    // The synthetic oracle's target pull already supervises appearance.
    if (a.oracle == "synthetic") tc.clip_weight = 0.0;
    if (!a.config.empty()) apply_config_file(a.config, model, tc);
    if (a.steps) tc.total_steps = *a.steps;
    if (a.batch) tc.batch_size = *a.batch;
    if (a.lr) tc.adam.lr = *a.lr;
    if (a.render_hw) tc.render_hw = *a.render_hw;
    if (a.seed) {
      tc.seed = *a.seed;
      model.init_seed = *a.seed;
    }
    if (a.plain_sigmoid) tc.scaled_sigmoid = false;
    try {
      st = init_train_state(model, tc, train_set.size());
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (st.step > st.train.total_steps) throw UsageError("checkpoint is past --steps");

  Services svc(a.oracle, st.model, st.train.render_hw);
  if (auto* rt = svc.remote_text()) {
    std::vector<std::string> texts;
    for (const auto* r : train_set) texts.push_back(r->text);
    rt->prefetch(texts);
  }
  TrainContext ctx{svc.oracle(), svc.text(), svc.features(), svc.schedule(), a.threads.value_or(1)};

  const fs::path dir = a.out;
  fs::create_directories(dir);
  const Index every = a.every.value_or(std::max<Index>(1, st.train.total_steps / 4));
  if (every < 1) throw UsageError("--checkpoint-every must be >= 1");
  std::vector<std::string> planned;
  for (Index s = st.step + 1; s <= st.train.total_steps; ++s) {
    if (s % every == 0 || s == st.train.total_steps) planned.push_back(checkpoint_path(dir, s).string());
  }
  const fs::path metrics_path = dir / "metrics.jsonl";
  json manifest = {{"model", st.model},
                   {"train", st.train},
                   {"dataset", {{"path", a.data}, {"sha256", sha256_hex(read_file(a.data))}, {"train_prompts", train_set.size()}}},
                   {"seed", st.train.seed},
                   {"oracle", a.oracle},
                   {"start_step", st.step},
                   {"resumed_from", a.resume.empty() ? json(nullptr) : json(a.resume)},
                   {"checkpoints", planned},
                   {"metrics", metrics_path.string()}};
  fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path)) manifest_path = dir / ("manifest_from_" + std::to_string(st.step) + ".json");
  write_file(manifest_path, manifest.dump(2) + "\n");

  std::ofstream metrics(metrics_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
  err << "training " << train_set.size() << " prompts, steps " << st.step << " -> " << st.train.total_steps
      << ", batch " << st.train.batch_size << ", oracle " << a.oracle << "\n";
  while (st.step < st.train.total_steps) {
    const auto batch = batch_for_step(train_set, st.train.batch_size, st.step, st.train.seed);
    const StepMetrics m = train_step(st, batch, ctx);
    metrics << json{{"step", m.step + 1},
                    {"loss", m.loss},
                    {"alpha", m.alpha},
                    {"mean_C", m.mean_severity},
                    {"mean_w_neg", m.mean_w_neg}}
                   .dump()
            << "\n";
    if (st.step % every == 0 || st.step == st.train.total_steps) {
      metrics.flush();
      save_checkpoint(checkpoint_path(dir, st.step), st);
    }
    if (a.log_every > 0 && (st.step % a.log_every == 0 || st.step == st.train.total_steps)) {
      err << "step " << st.step << " loss " << m.loss << " alpha " << m.alpha << " C " << m.mean_severity << " ("
          << std::fixed << std::setprecision(2) << m.seconds << " s/step)" << std::defaultfloat
          << std::setprecision(6) << "\n";
    }
  }
  out << checkpoint_path(dir, st.step).string() << "\n";
  return kOk;
}

// ---- render ----

struct RenderArgs {
  std::string ckpt, prompt, out = ".", oracle = "synthetic";
  Index views = 8, hw = 256, n_uniform = 64, n_importance = 64;
  std::uint64_t seed = 0;
};

int render_cmd(const RenderArgs& a, std::ostream& out, std::ostream& err) {
  const TrainState st = load_state(a.ckpt);
  Services svc(a.oracle, st.model, st.train.render_hw);
  const TextCondition<double> cond = svc.text().encode(a.prompt);
  const auto t0 = std::chrono::steady_clock::now();
  const PromptRenders r = render_views(st, cond, eval_poses(a.views), a.hw, a.seed, std::nullopt, a.n_uniform,
                                       a.n_importance);
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  err << "decode " << std::fixed << std::setprecision(1) << 1e3 * r.decode_seconds << " ms, " << a.views
      << " views at " << a.hw << "x" << a.hw << " in " << total << " s" << std::defaultfloat << "\n";
  fs::create_directories(a.out);
  for (std::size_t v = 0; v < r.images.size(); ++v) {
    char name[32];
    std::snprintf(name, sizeof(name), "view_%02zu.png", v);
    const fs::path p = fs::path(a.out) / name;
    save_png(p, r.images[v].cast<float>(), false);
    out << p.string() << "\n";
  }
  return kOk;
}

// ---- eval ----

struct EvalArgs {
  std::string ckpt, curve, data, oracle = "synthetic", out, csv, query = "all";
  Index hw = 64, n_uniform = 64, n_importance = 64;
  std::uint64_t seed = 0;
};

std::vector<std::pair<Index, fs::path>> curve_checkpoints(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingInput("run directory not found: " + dir.string());
  static const std::regex name("ckpt_([0-9]+)");
  std::vector<std::pair<Index, fs::path>> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string f = e.path().filename().string();
    if (std::regex_match(f, m, name)) found.emplace_back(std::stoll(m[1]), e.path());
  }
  std::sort(found.begin(), found.end());
  if (found.empty()) throw MissingInput("no ckpt_<step> files in " + dir.string());
  return found;
}

int eval_cmd(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const auto records = load_dataset(a.data);
  std::vector<const PromptRecord*> query;
  std::size_t n_train = 0;
  for (const auto& r : records) {
    n_train += r.split == Split::kTrain;
    if (a.query == "all" || (a.query == "train") == (r.split == Split::kTrain)) query.push_back(&r);
  }
  if (query.empty()) throw UsageError("empty query set");

  std::vector<std::pair<Index, fs::path>> ckpts;
  if (!a.curve.empty()) {
    ckpts = curve_checkpoints(a.curve);
  } else {
    ckpts.emplace_back(0, a.ckpt);
  }

  EvalReport report;
  Tensord text_features;
  std::unique_ptr<Services> svc;
  for (std::size_t k = 0; k < ckpts.size(); ++k) {
    const TrainState st = load_state(ckpts[k].second);
    if (!svc) {
      svc = std::make_unique<Services>(a.oracle, st.model, a.hw);
      if (const SyntheticOracle* syn = svc->synthetic()) {
        text_features = target_text_features(query, *syn, svc->features(), a.hw);
      } else {
        std::vector<std::string> texts;
        for (const auto* r : query) texts.push_back(r->text);
        std::vector<Tensord> rows;
        for (std::size_t at = 0; at < texts.size(); at += 64) {
          const std::vector<std::string> chunk(texts.begin() + std::ptrdiff_t(at),
                                               texts.begin() + std::ptrdiff_t(std::min(texts.size(), at + 64)));
          for (auto& c : svc->client()->text_embeddings(chunk)) rows.push_back(c.sentence_embedding);
        }
        text_features = Tensord({Index(rows.size()), rows.front().size()});
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (Index d = 0; d < rows[i].size(); ++d) text_features[Index(i) * rows[i].size() + d] = rows[i][d];
      }
    }
    EvalOptions opts;
    opts.hw = a.hw;
    opts.n_uniform = a.n_uniform;
    opts.n_importance = a.n_importance;
    opts.noise_seed = a.seed;
    const RetrievalScores s = clip_rp(st, query, svc->text(), svc->features(), text_features, opts);
    const double vpp = views_pp(st.step, st.train.batch_size, std::int64_t(n_train));
    report.curve.push_back({st.step, vpp, s.clip_rp});
    err << "step " << st.step << " views_pp " << vpp << " clip_rp " << s.clip_rp << "\n";
    if (k + 1 == ckpts.size()) {
      report.views_pp = vpp;
      report.clip_rp = s.clip_rp;
      report.ranks = s.ranks;
      report.per_prompt = s.per_prompt;
      for (const auto* r : query) report.prompt_ids.push_back(r->id);
    }
  }
  const std::string text = report_json(report);
  if (a.out.empty()) {
    out << text;
  } else {
    write_file(a.out, text);
  }
  if (!a.csv.empty()) write_file(a.csv, curve_csv(report.curve));
  return kOk;
}

// ---- gradcheck ----

struct GradArgs {
  double tol32 = 1e-3, tol64 = 1e-6;
  int cases = 2;
  std::string precision = "both";
  bool inject_fault = false;
  std::uint64_t seed = 1;
};

int gradcheck(const GradArgs& a, std::ostream& out) {
  int failures = 0, cases = 0;
  auto report = [&](const char* mode, const std::vector<SuiteResult>& results, double tol) {
    for (const auto& r : results) {
      const bool ok = r.failures == 0;
      out << (ok ? "PASS " : "FAIL ") << mode << " " << r.name << " cases " << r.cases << " worst "
          << r.worst_rel_error << " tol " << tol << "\n";
      failures += !ok;
      cases += r.cases;
    }
  };
  if (a.precision != "f32") {
    auto checks = full_gradient_suite<double>();
    if (a.inject_fault) checks.push_back(faulty_check<double>());
    report("f64", run_primitive_suite(checks, a.cases, a.tol64, a.seed), a.tol64);
  }
  if (a.precision != "f64") {
    auto checks = primitive_checks<float>();
    if (a.inject_fault) checks.push_back(faulty_check<float>());
    report("f32", run_primitive_suite(checks, a.cases, a.tol32, a.seed), a.tol32);
    report("f32", run_pipeline_suite_f32(a.cases, a.tol32, a.seed), a.tol32);
  }
  out << (failures == 0 ? "all " : "") << cases << " cases, " << failures << " failing checks\n";
  return failures == 0 ? kOk : kFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Amortized text-to-3D training on a conditional triplane decoder", "it3d"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-prompts", "Write a prompt set as JSONL");
  g->add_option("--set", gen.set, "animals, portraits or desk")
      ->required()
      ->check(CLI::IsMember({"animals", "portraits", "desk"}));
  g->add_option("--seed", gen.seed, "Split seed");
  g->add_option("--train-frac", gen.train_frac, "Training fraction")->check(CLI::Range(0.0, 1.0));
  g->add_option("--out", gen.out, "Output JSONL")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the decoder with score distillation");
  t->add_option("--data", tr.data, "Prompt JSONL")->required();
  t->add_option("--oracle", tr.oracle, "synthetic, remote or remote:<url>");
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--resume", tr.resume, "Checkpoint to continue from");
  t->add_option("--config", tr.config, "TOML file with [model] and [train] tables");
  t->add_option("--steps", tr.steps, "Total steps")->check(CLI::PositiveNumber);
  t->add_option("--batch", tr.batch, "Prompts per step")->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.lr, "Adam learning rate");
  t->add_option("--render-hw", tr.render_hw, "Training render size")->check(CLI::PositiveNumber);
  t->add_option("--seed", tr.seed, "Training and init seed");
  t->add_option("--threads", tr.threads, "Worker threads per batch")->check(CLI::PositiveNumber);
  t->add_option("--checkpoint-every", tr.every, "Steps between checkpoints")->check(CLI::PositiveNumber);
  t->add_option("--log-every", tr.log_every, "Steps between progress lines (0 = quiet)");
  t->add_flag("--plain-sigmoid", tr.plain_sigmoid, "Disable the scaled sigmoid");

  RenderArgs rd;
  auto* r = app.add_subcommand("render", "Render a prompt from a checkpoint");
  r->add_option("--ckpt", rd.ckpt, "Checkpoint")->required();
  r->add_option("--prompt", rd.prompt, "Prompt text")->required();
  r->add_option("--views", rd.views, "Views around the object")->check(CLI::PositiveNumber);
  r->add_option("--hw", rd.hw, "Image size")->check(CLI::PositiveNumber);
  r->add_option("--samples", rd.n_uniform, "Stratified samples per ray")->check(CLI::PositiveNumber);
  r->add_option("--importance", rd.n_importance, "Importance samples per ray")->check(CLI::NonNegativeNumber);
  r->add_option("--out", rd.out, "Output directory");
  r->add_option("--seed", rd.seed, "Style noise seed");
  r->add_option("--oracle", rd.oracle, "Text features: synthetic or remote[:url]");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Views-PP and CLIP-RP of checkpoints");
  auto* ck = e->add_option("--ckpt", ev.ckpt, "Checkpoint");
  auto* cv = e->add_option("--curve", ev.curve, "Run directory; evaluates every ckpt_<step>");
  ck->excludes(cv);
  e->add_option("--data", ev.data, "Prompt JSONL (query set)")->required();
  e->add_option("--query", ev.query, "Query set")->check(CLI::IsMember({"all", "train", "test"}));
  e->add_option("--oracle", ev.oracle, "synthetic or remote[:url]");
  e->add_option("--hw", ev.hw, "Render size")->check(CLI::PositiveNumber);
  e->add_option("--samples", ev.n_uniform, "Stratified samples per ray")->check(CLI::PositiveNumber);
  e->add_option("--importance", ev.n_importance, "Importance samples per ray")->check(CLI::NonNegativeNumber);
  e->add_option("--seed", ev.seed, "Style noise seed");
  e->add_option("--out", ev.out, "Report JSON (default stdout)");
  e->add_option("--csv", ev.csv, "Curve CSV");

  GradArgs gr;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference checks of every primitive and the composed path");
  c->add_option("--tol", gr.tol32, "f32 tolerance");
  c->add_option("--tol64", gr.tol64, "f64 tolerance");
  c->add_option("--cases", gr.cases, "Seeded cases per check")->check(CLI::PositiveNumber);
  c->add_option("--precision", gr.precision)->check(CLI::IsMember({"f32", "f64", "both"}));
  c->add_option("--seed", gr.seed, "Base seed");
  c->add_flag("--inject-fault", gr.inject_fault, "Add a primitive with a wrong backward");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    if (e->parsed() && ev.ckpt.empty() && ev.curve.empty()) throw CLI::RequiredError("--ckpt or --curve");
  } catch (const CLI::CallForHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kUsage;
  }

  try {
    if (g->parsed()) return gen_prompts(gen, err);
    if (t->parsed()) return train(tr, out, err);
    if (r->parsed()) return render_cmd(rd, out, err);
    if (e->parsed()) return eval_cmd(ev, out, err);
    if (c->parsed()) return gradcheck(gr, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const MissingInput& ex) {
    err << "error: " << ex.what() << "\n";
    return kMissingInput;
  } catch (const CheckpointError& ex) {
    err << "error: " << ex.what() << "\n";
    return kMissingInput;
  } catch (const OracleError& ex) {
    err << "oracle error: " << ex.what() << "\n";
    return kOracleFailure;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kFailed;
  }
  return kUsage;
}

}  // namespace it3d::cli
