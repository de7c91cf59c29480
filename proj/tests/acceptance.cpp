// Acceptance run: one PASS/FAIL line per criterion. Stochastic criteria use a
// majority over seeds 0, 1, 2; the third seed only runs when the first two
// disagree. Exit status is non-zero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "forenvit/cli/commands.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace forenvit;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

nlohmann::json json_file(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

fs::path work_root() {
  static const fs::path root = [] {
    const char* env = std::getenv("FORENVIT_ACCEPTANCE_DIR");
    const fs::path r = env ? fs::path(env) : fs::temp_directory_path() / "forenvit_acceptance";
    fs::remove_all(r);
    fs::create_directories(r);
    return r;
  }();
  return root;
}

/// Runs the command-line front end in-process; throws on a non-zero exit.
std::string forenvit(std::vector<std::string> args) {
  args.insert(args.begin(), "forenvit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) throw std::runtime_error("forenvit " + args[1] + " exited " + std::to_string(code) + ": " + err.str());
  return out.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

/// Everything one seed produces, computed on first use.
class SeedRun {
 public:
  explicit SeedRun(std::uint64_t seed) : seed_(seed), dir_(work_root() / ("seed" + std::to_string(seed))) {}

  std::uint64_t seed() const { return seed_; }
  std::string s() const { return std::to_string(seed_); }

  const fs::path& corpus() {
    if (!corpus_ready_) {
      forenvit({"generate", "--seed", s(), "--out", (dir_ / "corpus").string()});
      corpus_ready_ = true;
    }
    static thread_local fs::path p;
    p = dir_ / "corpus";
    return p;
  }

  const Manifest& manifest() {
    if (!manifest_) manifest_ = load_manifest(corpus() / "manifest.tsv");
    return *manifest_;
  }

  const Dataset& split(const std::string& name) {
    auto it = splits_.find(name);
    if (it == splits_.end()) it = splits_.emplace(name, load_split(manifest(), name)).first;
    return it->second;
  }

  /// Approach 2, k = 2, default schedule, random-init backbone.
  fs::path approach2() {
    return trained("a2", {"--approach", "2", "--k", "2"}, a2_seconds_);
  }
  double approach2_seconds() {
    approach2();
    return a2_seconds_;
  }

  /// Approach 1: linear adaptors, concat, dropout, k = 4.
  fs::path approach1() {
    return trained("a1", {"--approach", "1", "--k", "4", "--fusion", "concat", "--adaptor", "linear", "--dropout", "0.1"},
                   a1_seconds_);
  }
  double approach1_seconds() {
    approach1();
    return a1_seconds_;
  }

  fs::path masked_backbone() {
    const auto out = dir_ / "pretrain";
    if (!fs::exists(out / "backbone.fvt"))
      forenvit({"pretrain", "--recipe", "masked", "--manifest", corpus().string(), "--seed", s(), "--out", out.string()});
    return out / "backbone.fvt";
  }

  /// Reports of the linear and mlp2 probes; `backbone` empty = random init.
  const std::map<std::string, MetricReport>& probes(const std::string& tag, const std::string& backbone) {
    auto it = probes_.find(tag);
    if (it != probes_.end()) return it->second;
    const auto out = dir_ / ("probe_" + tag);
    std::vector<std::string> args{"probe", "--probe", "linear,mlp2", "--manifest", corpus().string(), "--seed", s(),
                                  "--out", out.string()};
    if (!backbone.empty()) args.insert(args.end(), {"--backbone", backbone});
    forenvit(args);
    std::map<std::string, MetricReport> r;
    for (const auto* k : {"linear", "mlp2"}) r[k] = metric_report_from_json(json_file(out / ("probe_" + std::string(k) + ".json")));
    return probes_.emplace(tag, std::move(r)).first->second;
  }

  MetricReport eval(const std::string& split, const std::string& calibrate_on) {
    const auto out = dir_ / ("eval_" + split);
    std::vector<std::string> args{"eval", "--checkpoint", (approach2() / "detector.fvt").string(), "--manifest",
                                  corpus().string(), "--split", split, "--out", out.string()};
    if (!calibrate_on.empty()) args.insert(args.end(), {"--calibrate-on", calibrate_on});
    forenvit(args);
    return metric_report_from_json(json_file(out / ("report_" + split + ".json")));
  }

  const nlohmann::json& ablation() {
    if (!ablation_) {
      const auto out = dir_ / "ablate";
      forenvit({"ablate", "--k-list", "1,2,4,8", "--manifest", corpus().string(), "--seed", s(), "--out", out.string()});
      ablation_ = json_file(out / "ablation.json");
      ablation_rows_ = 0;
      std::istringstream in(slurp(out / "ablation.tsv"));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) ablation_rows_ += !line.empty();
    }
    return *ablation_;
  }
  std::size_t ablation_rows() {
    ablation();
    return ablation_rows_;
  }

  Backbone<float> fresh_backbone() const { return Backbone<float>(ViTConfig{}, Rng(seed_).derive("backbone")); }

 private:
  fs::path trained(const std::string& tag, std::vector<std::string> flags, double& seconds) {
    const auto out = dir_ / tag;
    if (!fs::exists(out / "detector.fvt")) {
      const auto& c = corpus();
      flags.insert(flags.end(), {"--manifest", c.string(), "--seed", s(), "--out", out.string()});
      flags.insert(flags.begin(), "train");
      const auto t0 = Clock::now();
      forenvit(flags);
      seconds = seconds_since(t0);
    }
    return out;
  }

  std::uint64_t seed_;
  fs::path dir_;
  bool corpus_ready_ = false;
  std::optional<Manifest> manifest_;
  std::map<std::string, Dataset> splits_;
  double a2_seconds_ = 0, a1_seconds_ = 0;
  std::map<std::string, std::map<std::string, MetricReport>> probes_;
  std::optional<nlohmann::json> ablation_;
  std::size_t ablation_rows_ = 0;
};

SeedRun& seed_run(std::uint64_t s) {
  static std::map<std::uint64_t, std::unique_ptr<SeedRun>> runs;
  auto& r = runs[s];
  if (!r) r = std::make_unique<SeedRun>(s);
  return *r;
}

/// Two of three seeds must pass; seed 2 runs only on a split decision.
Outcome majority(const std::function<Outcome(SeedRun&)>& check) {
  std::vector<Outcome> got;
  int passes = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    if (s == 2 && (passes == 2 || passes == 0)) break;
    Outcome o;
    try {
      o = check(seed_run(s));
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    passes += o.pass;
    got.push_back(o);
  }
  std::string detail;
  for (std::size_t i = 0; i < got.size(); ++i)
    detail += (i ? "; " : "") + std::string("seed ") + std::to_string(i) + (got[i].pass ? " ok " : " FAIL ") + got[i].detail;
  return {passes >= 2, std::to_string(passes) + "/" + std::to_string(got.size()) + " seeds [" + detail + "]"};
}

// ---- deterministic criteria -----------------------------------------------

Outcome c1_gradients() {
  const auto t0 = Clock::now();
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.depth = 2;
  c.width = 16;
  c.heads = 2;
  c.registers = 1;
  c.mlp_ratio = 2;
  Rng rng(101);
  std::vector<double> px(2 * 64);
  for (auto& v : px) v = rng.uniform();
  const Tensor<double> img({2, 1, 8, 8}, px);
  const std::vector<int> labels{1, 0};
  std::size_t checked = 0, failures = 0;
  double worst = 0;
  std::string first;
  auto tally = [&](const testing::GradCheckResult& r) {
    checked += r.checked;
    failures += r.failures;
    worst = std::max(worst, r.worst_relative);
    if (first.empty()) first = r.first_failure;
  };

  // Approach 2 stack: backbone plus classifier on phi_n's CLS row.
  {
    HeadConfig h;
    h.approach = Approach::finetune;
    Detector<double> det(Backbone<double>(c, Rng(102)), h, Rng(103));
    det.set_all_trainable(true);
    const auto named = det.parameters();
    std::vector<std::pair<std::string, Tensor<double>>> leaves(named.begin(), named.end());
    tally(testing::check_gradients(leaves, [&] { return ops::bce_with_logits(det.logits(img, 2), labels); }, 1e-5, 1e-2));
  }
  // Approach 1 stack through every block: linear adaptors, weighted sum, all tokens, mlp2.
  {
    HeadConfig h;
    h.approach = Approach::frozen_fusion;
    h.fusion.k = 2;
    h.fusion.mode = FusionMode::weighted_sum;
    h.fusion.scope = TokenScope::all_tokens;
    h.adaptor = AdaptorKind::linear;
    h.adaptor_dim = 6;
    h.head = HeadKind::mlp2;
    Detector<double> det(Backbone<double>(c, Rng(104)), h, Rng(105));
    auto fl = det.fusion_logits.mutable_data();
    for (auto& v : fl) v = rng.normal(0, 0.5);
    det.set_all_trainable(true);
    const auto named = det.parameters();
    std::vector<std::pair<std::string, Tensor<double>>> leaves(named.begin(), named.end());
    const auto loss = [&] {
      const auto res = det.backbone.forward(img, 2, det.taps());
      return ops::bce_with_logits(det.logits_from_taps(res.taps, 2, Mode::eval, nullptr), labels);
    };
    tally(testing::check_gradients(leaves, loss, 1e-5, 1e-2));
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && secs < 60,
          std::to_string(checked) + " entries, worst relative error " + fmt("%.2e", worst) + ", " + fmt("%.1f s", secs) +
              (failures ? ", first failure " + first : "")};
}

template <typename Fn>
std::size_t run_steps(Detector<float>& det, const Dataset& d, std::size_t steps, Fn&& forward) {
  auto params = det.parameters();
  OptimizerState opt;
  Rng rng(7);
  std::size_t done = 0;
  while (done < steps)
    for (const auto& idx : batch_order(d.count(), 8, &rng)) {
      if (done == steps) break;
      const auto b = make_batch(d, idx);
      backward(ops::bce_with_logits(forward(b.images, idx.size(), rng), b.labels));
      optimizer_step(params, opt);
      ++done;
    }
  return done;
}

Outcome c2_freeze() {
  auto& run = seed_run(0);
  const auto& train_set = run.split("train");
  std::vector<std::string> problems;

  // Approach 1: backbone bytes untouched.
  HeadConfig h1;
  h1.approach = Approach::frozen_fusion;
  h1.fusion.k = 4;
  h1.fusion.scope = TokenScope::all_tokens;
  h1.adaptor_dropout = 0.1;
  Detector<float> a1(run.fresh_backbone(), h1, Rng(1));
  const auto before1 = snapshot(a1.parameters());
  run_steps(a1, train_set, 50, [&](const Tensor<float>& x, std::size_t b, Rng& r) { return a1.logits(x, b, Mode::train, &r); });
  std::size_t head_changed = 0;
  for (const auto& [name, t] : a1.parameters()) {
    const bool same = std::equal(t.data().begin(), t.data().end(), before1.at(name).begin());
    if (name.rfind("backbone/", 0) == 0 && !same) problems.push_back("approach 1 changed " + name);
    if (name.rfind("head/", 0) == 0 && !same) ++head_changed;
  }
  if (head_changed == 0) problems.push_back("approach 1 head did not move");

  // Approach 2, n = 8, k = 2: only blocks 7-8, CLS/register tokens and the head may change.
  HeadConfig h2;
  h2.approach = Approach::finetune;
  h2.plan.k = 2;
  Detector<float> a2(run.fresh_backbone(), h2, Rng(2));
  const auto before2 = snapshot(a2.parameters());
  run_steps(a2, train_set, 50, [&](const Tensor<float>& x, std::size_t b, Rng& r) { return a2.logits(x, b, Mode::train, &r); });
  auto allowed = [](const std::string& n) {
    return n.rfind("backbone/blocks.07.", 0) == 0 || n.rfind("backbone/blocks.08.", 0) == 0 || n == "backbone/cls_token" ||
           n == "backbone/registers" || n.rfind("head/", 0) == 0;
  };
  std::set<std::string> moved_groups;
  std::size_t changed = 0, total = 0;
  for (const auto& [name, t] : a2.parameters()) {
    ++total;
    const bool same = std::equal(t.data().begin(), t.data().end(), before2.at(name).begin());
    if (same) continue;
    ++changed;
    if (!allowed(name)) problems.push_back("approach 2 changed " + name);
    moved_groups.insert(name.rfind("head/", 0) == 0 ? "head" : name.substr(0, 19));
  }
  for (const auto* g : {"backbone/blocks.07.", "backbone/blocks.08.", "backbone/cls_token", "head"})
    if (!moved_groups.count(g)) problems.push_back(std::string("approach 2 left ") + g + " unchanged");
  std::string detail = "50 steps each; approach 2 changed " + std::to_string(changed) + "/" + std::to_string(total) +
                       " named parameters";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

Outcome c3_reduction() {
  ViTConfig c;
  HeadConfig h;
  h.approach = Approach::frozen_fusion;
  h.fusion.k = 1;
  h.fusion.mode = FusionMode::concat;
  h.fusion.scope = TokenScope::cls_only;
  h.adaptor = AdaptorKind::none;
  Detector<float> det(Backbone<float>(c, Rng(31)), h, Rng(32));
  const auto& test = seed_run(0).split("test");
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  const auto b = make_batch(test, idx);
  const auto via_fusion = det.logits(b.images, idx.size());
  const auto res = det.backbone.forward(b.images, idx.size());
  std::vector<std::size_t> cls(idx.size());
  for (std::size_t i = 0; i < cls.size(); ++i) cls[i] = i * c.tokens();
  const auto direct = det.head.logits(ops::gather_rows(res.last_block, cls));
  std::size_t mismatches = 0;
  const auto a = via_fusion.data(), z = direct.data();
  for (std::size_t i = 0; i < idx.size(); ++i) mismatches += std::memcmp(&a[i], &z[i], sizeof(float)) != 0;
  return {mismatches == 0, std::to_string(idx.size()) + " logits, " + std::to_string(mismatches) + " bitwise mismatches"};
}

ScoreSet random_scores(Rng& rng) {
  const std::size_t n = 2 + rng.below(29);
  ScoreSet s;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = rng.bernoulli(0.4) ? std::round(rng.uniform() * 8) / 8 : rng.uniform();
    s.push_back({v, static_cast<int>(rng.below(2)), "m"});
  }
  s[0].label = 1;
  s[1].label = 0;
  return s;
}

Outcome c4_eer_oracle() {
  Rng rng(41);
  double worst = 0, worst_cube = 0;
  for (int t = 0; t < 200; ++t) {
    const auto s = random_scores(rng);
    const double e = eer(s).eer;
    worst = std::max(worst, std::fabs(e - testing::sweep_eer(s)));
    auto cubed = s;
    for (auto& x : cubed) x.score = x.score * x.score * x.score;
    worst_cube = std::max(worst_cube, std::fabs(eer(cubed).eer - e));
  }
  ScoreSet hand;
  for (double p : {0.9, 0.8, 0.3}) hand.push_back({p, 1, "fake"});
  for (double n : {0.1, 0.2, 0.7}) hand.push_back({n, 0, "real"});
  const double h = eer(hand).eer;
  const bool ok = worst <= 1e-9 && worst_cube <= 1e-9 && std::fabs(h - 1.0 / 3) <= 1e-9;
  return {ok, "200 sets: max |eer - sweep| " + fmt("%.1e", worst) + ", max |eer(s^3) - eer(s)| " + fmt("%.1e", worst_cube) +
                  ", hand case " + fmt("%.12f", h)};
}

Outcome c5_calibration() {
  Rng rng(51);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const auto s = random_scores(rng);
    const auto policy = calibrate(s, "val");
    worst = std::max(worst, std::fabs(evaluate(s, policy).hter / 100.0 - eer(s).eer));
  }
  return {worst <= 1e-6, "100 sets: max |HTER(tau) - EER| " + fmt("%.1e", worst)};
}

// ---- stochastic criteria ---------------------------------------------------

Outcome c6_learning(SeedRun& r) {
  const auto a2 = detector_from_checkpoint(load_checkpoint(r.approach2() / "detector.fvt"));
  const auto a1 = detector_from_checkpoint(load_checkpoint(r.approach1() / "detector.fvt"));
  const double e2 = 100 * eer(score_dataset(a2, r.split("test"))).eer;
  const double e1 = 100 * eer(score_dataset(a1, r.split("test"))).eer;
  const double t2 = r.approach2_seconds(), t1 = r.approach1_seconds();
  return {e2 < 10 && e1 < 20 && t2 < 600 && t1 < 600,
          fmt("approach 2 EER %.2f%% (%.0f s), approach 1 EER %.2f%% (%.0f s)", e2, t2, e1, t1)};
}

Outcome c7_mlp_vs_linear(SeedRun& r) {
  const auto& p = r.probes("masked", r.masked_backbone().string());
  const double lin = p.at("linear").accuracy, mlp = p.at("mlp2").accuracy;
  return {mlp >= lin, fmt("mlp2 %.2f%% vs linear %.2f%%", mlp, lin)};
}

Outcome c8_pretraining(SeedRun& r) {
  const double masked = r.probes("masked", r.masked_backbone().string()).at("linear").eer;
  const double random = r.probes("random", "").at("linear").eer;
  return {random - masked >= 2.0, fmt("linear-probe EER masked %.2f%% vs random %.2f%%", masked, random)};
}

Outcome c9_cross_dataset(SeedRun& r) {
  const auto seen = r.eval("test", "");
  const auto unseen = r.eval("test_unseen", "val_unseen");
  return {unseen.eer > seen.eer, fmt("unseen EER %.2f%% (tau %.3f from val_unseen) vs seen %.2f%%", unseen.eer, unseen.tau,
                                     seen.eer)};
}

Outcome c10_attention(SeedRun& r) {
  const auto det = detector_from_checkpoint(load_checkpoint(r.approach2() / "detector.fvt"));
  const auto fresh = r.fresh_backbone();
  const ViTConfig vit;
  const auto layout = token_layout(vit);

  // Row sums on random inputs.
  Rng rng(r.seed() * 7 + 1);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    std::vector<float> px(vit.image_size * vit.image_size);
    for (auto& v : px) v = static_cast<float>(rng.uniform());
    const auto res = det.backbone.forward(Tensor<float>({1, 1, vit.image_size, vit.image_size}, px), 1);
    const auto row = cls_row_average(*res.final_attention, 0);
    double sum = 0;
    for (double v : row) sum += v;
    worst = std::max(worst, std::fabs(sum - 1.0));
  }

  // Mass inside the artifact mask on 20 test fakes.
  const auto& test = r.split("test");
  const auto& m = r.manifest();
  double tuned = 0, initial = 0;
  std::vector<std::string> images;
  for (std::size_t i = 0; i < test.count() && images.size() < 20; ++i) {
    if (test.labels[i] != 1) continue;
    const auto mask = read_image(m.base_dir / mask_path_for(test.paths[i]));
    const std::vector<float> px(test.pixels.begin() + static_cast<std::ptrdiff_t>(i * 784),
                                test.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * 784));
    const Tensor<float> x({1, 1, 28, 28}, px);
    tuned += mass_inside(cls_attention_map(*det.backbone.forward(x, 1).final_attention, layout), mask);
    initial += mass_inside(cls_attention_map(*fresh.forward(x, 1).final_attention, layout), mask);
    images.push_back((m.base_dir / test.paths[i]).string());
  }
  tuned /= static_cast<double>(images.size());
  initial /= static_cast<double>(images.size());

  // Overlay export twice.
  bool same = true;
  for (const auto* tag : {"vis_a", "vis_b"}) {
    std::vector<std::string> args{"visualize", "--checkpoint", (r.approach2() / "detector.fvt").string(), "--reference",
                                  "fresh", "--seed", r.s(), "--out", (work_root() / ("seed" + r.s()) / tag).string()};
    args.insert(args.end(), images.begin(), images.begin() + 3);
    forenvit(args);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const auto name = fs::path(images[i]).stem().string() + "_attention.ppm";
    same &= slurp(work_root() / ("seed" + r.s()) / "vis_a" / name) == slurp(work_root() / ("seed" + r.s()) / "vis_b" / name);
  }
  return {worst <= 1e-5 && tuned > initial && same,
          fmt("row-sum error %.1e; mean mask mass fine-tuned %.4f vs fresh %.4f; ", worst, tuned, initial) +
              (same ? "overlays byte-identical" : "overlays differ")};
}

Outcome c11_ablation(SeedRun& r) {
  const auto& rows = r.ablation();
  // Best k chosen on validation (ties to the smaller k), compared on test.
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].at("val_eer").get<double>() < rows[best].at("val_eer").get<double>()) best = i;
  const double k1 = rows[0].at("test_eer").get<double>(), bk = rows[best].at("test_eer").get<double>();
  std::string table;
  for (const auto& row : rows) table += fmt(" k=%.0f:%.2f", row.at("k").get<double>(), row.at("test_eer").get<double>());
  return {r.ablation_rows() == 4 && rows[0].at("k") == 1 && bk <= k1,
          std::to_string(r.ablation_rows()) + " rows; test EER" + table + "; best k by validation " +
              std::to_string(rows[best].at("k").get<std::size_t>())};
}

Outcome c12_checkpoints() {
  auto& r = seed_run(0);
  std::vector<std::string> problems;
  const auto dir = work_root() / "roundtrip";
  fs::create_directories(dir);
  // Detector: save -> load -> save.
  const auto original = r.approach2() / "detector.fvt";
  save_detector(dir / "detector_again.fvt", detector_from_checkpoint(load_checkpoint(original)),
                load_checkpoint(original).metadata.at("provenance"));
  if (slurp(original) != slurp(dir / "detector_again.fvt")) problems.push_back("detector bytes differ");
  // Backbone: save -> load -> save twice over.
  save_backbone(dir / "b1.fvt", r.fresh_backbone(), {{"note", "roundtrip"}});
  save_backbone(dir / "b2.fvt", backbone_from_checkpoint(load_checkpoint(dir / "b1.fvt")), {{"note", "roundtrip"}});
  if (slurp(dir / "b1.fvt") != slurp(dir / "b2.fvt")) problems.push_back("backbone bytes differ");
  // Mismatched configuration must name the parameter.
  ViTConfig wide;
  wide.width = 32;
  Backbone<float> other(wide, Rng(1));
  std::string named;
  try {
    load_backbone_into(other, load_checkpoint(original));
    problems.push_back("width mismatch loaded");
  } catch (const ParameterShapeError& e) {
    named = e.what();
    if (named.find("backbone/") == std::string::npos) problems.push_back("shape error does not name a parameter");
  }
  ViTConfig deep;
  deep.depth = 6;
  Backbone<float> shallow(deep, Rng(1));
  std::string unknown;
  try {
    load_backbone_into(shallow, load_checkpoint(original));
    problems.push_back("depth mismatch loaded");
  } catch (const UnknownParameterError& e) {
    unknown = e.what();
    if (unknown.find("backbone/blocks.07") == std::string::npos) problems.push_back("unknown-parameter error does not name it");
  }
  std::string detail = "detector and backbone files byte-identical after reload; width mismatch: \"" + named +
                       "\"; depth mismatch: \"" + unknown + "\"";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  std::cout << "acceptance work directory: " << work_root().string() << "\n" << std::flush;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"01 gradient integrity", c1_gradients},
      {"02 freeze contracts", c2_freeze},
      {"03 single-block reduction", c3_reduction},
      {"04 EER oracle equivalence", c4_eer_oracle},
      {"05 calibration self-consistency", c5_calibration},
      {"06 end-to-end learning", [] { return majority(c6_learning); }},
      {"07 mlp2 probe >= linear probe", [] { return majority(c7_mlp_vs_linear); }},
      {"08 masked pretraining beats random init", [] { return majority(c8_pretraining); }},
      {"09 cross-dataset protocol", [] { return majority(c9_cross_dataset); }},
      {"10 attention invariants", [] { return majority(c10_attention); }},
      {"11 k ablation", [] { return majority(c11_ablation); }},
      {"12 checkpoint round trip", c12_checkpoints},
  };
  // FORENVIT_ACCEPTANCE_ONLY=01,06 restricts the run to the listed criteria.
  const char* only = std::getenv("FORENVIT_ACCEPTANCE_ONLY");
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (only && std::string(only).find(name.substr(0, 2)) == std::string::npos) continue;
    const auto tc = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << " :: " << o.detail << fmt(" (%.0f s)", seconds_since(tc)) << "\n"
              << std::flush;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed"))
            << fmt(" in %.0f s\n", seconds_since(t0));
  return failed ? 1 : 0;
}
