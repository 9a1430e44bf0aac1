// Acceptance suite: one PASS/FAIL/SKIP line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "attrvr/attrvr.hpp"

using namespace attrvr;
namespace fs = std::filesystem;

namespace {

// Tolerances and runtime limits.
constexpr double kGradRelTol = 1e-2;
constexpr double kGradStep = 1e-3;
constexpr double kIdentityTol = 1e-12;
constexpr double kCsTol = 1e-10;
constexpr double kLemmaTol = 1e-12;
constexpr double kReferenceTol = 1e-12;
constexpr double kPetsTarget = 0.933;
constexpr double kPetsBand = 0.015;
constexpr double kLimit1 = 5.0, kLimit2 = 30.0, kLimit3 = 5.0, kLimit4 = 20.0, kLimit5 = 300.0;

struct Outcome {
  enum Kind { pass, fail, skip } kind = pass;
  std::string detail;
};

Outcome fail(const std::string& why) { return {Outcome::fail, why}; }
Outcome skip(const std::string& why) { return {Outcome::skip, why}; }

fs::path fixtures() { return ATTRVR_FIXTURES; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag)
      : path_(fs::temp_directory_path() / ("attrvr_accept_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Tensor random_tensor(Shape3 s, Rng& rng, double lo, double hi) {
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

std::size_t count_ones(const Tensor& m) {
  std::size_t n = 0;
  for (double v : m.values()) n += v == 1.0 ? 1 : 0;
  return n;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// 1: mask geometry
Outcome geometry() {
  Rng rng(20240601);
  for (std::size_t f : {16u, 30u}) {
    const auto p = make_pattern({224, 224}, 3, f);
    const std::size_t want = f == 16 ? 39936 : 69840;
    if (trainable_parameter_count(p) != want || count_ones(p.mask) != want) {
      return fail(detail::concat("frame ", f, " has ", trainable_parameter_count(p), " parameters"));
    }
  }
  for (int t = 0; t < 200; ++t) {
    const std::size_t h = 1 + rng.index(64), w = 1 + rng.index(64), c = 1 + rng.index(4);
    const std::size_t f = rng.index((std::min(h, w) + 1) / 2);
    auto p = make_pattern({h, w}, c, f);
    const std::size_t want = c * (h * w - (h - 2 * f) * (w - 2 * f));
    if (trainable_parameter_count(p) != want || count_ones(p.mask) != want) {
      return fail(detail::concat("count mismatch at ", h, "x", w, " c", c, " f", f));
    }
    if (h <= 2 * f || w <= 2 * f) continue;
    for (double& v : p.delta.values()) v = rng.uniform(-5.0, 5.0);
    const Tensor x = random_tensor({c, h - 2 * f, w - 2 * f}, rng, 0.0, 1.0);
    const Tensor out = pad_and_apply(x, p, false);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const bool inside = y >= f && y < h - f && xx >= f && xx < w - f;
          if (p.mask.at(ch, y, xx) != (inside ? 0.0 : 1.0)) return fail("mask wrong at case " + std::to_string(t));
          if (inside && out.at(ch, y, xx) != x.at(ch, y - f, xx - f)) {
            return fail("interior changed at case " + std::to_string(t));
          }
        }
  }
  return {Outcome::pass, "200 random geometries, counts 39936 / 69840"};
}

// 2: loss gradient against central differences
Outcome gradients() {
  const auto raw_bank = load_bank(fixtures() / "shapes7_bank.json");
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ToyEncoderConfig tc;
    tc.input = {3, 12, 12};
    tc.hidden_dim = 32;
    tc.seed = seed;
    ToyDualEncoder toy(tc);
    const auto bank = precompute_embeddings(raw_bank, toy);
    AttributeScorer scorer(bank, {}, toy.temperature());
    Rng rng(derive_seed(seed, 2));
    std::vector<ImageSample> batch;
    for (std::size_t i = 0; i < 4; ++i) batch.push_back({random_tensor({3, 8, 8}, rng, 0.0, 1.0), (i + seed) % 7});
    auto p = make_pattern({12, 12}, 3, 2);
    for (std::size_t i = 0; i < p.delta.size(); ++i) p.delta.values()[i] = p.mask.values()[i] * rng.uniform(-0.2, 0.2);
    std::vector<ClassSelections> frozen;
    for (const auto& s : batch) {
      frozen.push_back(scorer.select_all(scorer.text_sims(toy.encode_image(pad_and_apply(s.pixels, p, true))), {}));
    }
    const auto lg = ce_loss_and_grad(batch, p, scorer, toy, {}, frozen);
    std::vector<std::size_t> frame;
    for (std::size_t i = 0; i < p.mask.size(); ++i) {
      if (p.mask.values()[i] == 1.0) frame.push_back(i);
      else if (lg.grad.values()[i] != 0.0) return fail(detail::concat("interior gradient nonzero, seed ", seed));
    }
    for (int t = 0; t < 16; ++t) {
      const std::size_t i = frame[rng.index(frame.size())];
      auto pp = p, pm = p;
      pp.delta.values()[i] += kGradStep;
      pm.delta.values()[i] -= kGradStep;
      const double fd = (ce_loss_and_grad(batch, pp, scorer, toy, {}, frozen).loss -
                         ce_loss_and_grad(batch, pm, scorer, toy, {}, frozen).loss) /
                        (2.0 * kGradStep);
      const double e = rel_err(lg.grad.values()[i], fd);
      worst = std::max(worst, e);
      if (!(e < kGradRelTol)) return fail(detail::concat("seed ", seed, " index ", i, " rel err ", e));
    }
  }
  return {Outcome::pass, detail::concat("80 coordinates, worst rel err ", worst)};
}

// 3: scoring identities and top-k oracle
Outcome scoring() {
  Rng rng(31);
  constexpr double tau = 0.01;
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = 2 + rng.index(19), classes = 2 + rng.index(4), dim = 4 + rng.index(12);
    AttributeBank b;
    b.task_info = "thing";
    b.m = m;
    BankEmbeddings e;
    for (std::size_t c = 0; c < classes; ++c) {
      b.classes.push_back("class" + std::to_string(c));
      b.des.emplace_back();
      b.dist.emplace_back();
      e.des.emplace_back();
      e.dist.emplace_back();
      for (std::size_t i = 0; i < m; ++i) {
        b.des.back().push_back("descriptive attribute number " + std::to_string(i));
        b.dist.back().push_back("distinctive attribute number " + std::to_string(i));
        Embedding u(dim), v(dim);
        for (auto& x : u) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        e.des.back().push_back(std::move(u));
        e.dist.back().push_back(std::move(v));
      }
    }
    b.embeddings = std::move(e);
    Embedding z(dim);
    for (auto& x : z) x = rng.normal();
    const double lam = rng.uniform();
    for (std::size_t c = 0; c < classes; ++c) {
      ScoreConfig knn1{1, lam, Aggregation::knn, std::nullopt}, mx{1, lam, Aggregation::max, std::nullopt};
      ScoreConfig knnm{m, lam, Aggregation::knn, std::nullopt}, avg{1, lam, Aggregation::avg, std::nullopt};
      const double a = sim_attr(z, c, b, knn1, tau), bb = score_variant(z, c, b, mx, tau);
      if (a != bb) return fail(detail::concat("knn(1) != max on bank ", t));
      const double x = sim_attr(z, c, b, knnm, tau), y = score_variant(z, c, b, avg, tau);
      if (!(std::abs(x - y) <= kIdentityTol * std::max(1.0, std::abs(y)))) {
        return fail(detail::concat("knn(m) != avg on bank ", t, ": ", x, " vs ", y));
      }
    }
  }
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.index(40), k = 1 + rng.index(n);
    std::vector<double> v(n);
    // coarse values force ties
    for (auto& x : v) x = t % 2 == 0 ? std::round(rng.uniform(0.0, 5.0)) : rng.normal();
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t i = 0; i < n; ++i) order.emplace_back(-v[i], i);
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> want;
    for (std::size_t i = 0; i < k; ++i) want.push_back(order[i].second);
    if (knn_select(v, k) != want) return fail(detail::concat("knn_select differs from sort on vector ", t));
  }
  return {Outcome::pass, "100 banks, 1000 vectors"};
}

double brute_cs(const std::vector<Embedding>& x, const std::vector<std::size_t>& y, std::size_t k) {
  const std::size_t d = x[0].size();
  std::vector<Embedding> mu(k, Embedding(d, 0.0));
  std::vector<double> n(k, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    n[y[i]] += 1.0;
    for (std::size_t j = 0; j < d; ++j) mu[y[i]][j] += x[i][j];
  }
  for (std::size_t c = 0; c < k; ++c)
    for (auto& v : mu[c]) v /= n[c];
  double intra = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double tr = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (y[i] != c) continue;
      for (std::size_t j = 0; j < d; ++j) tr += (x[i][j] - mu[c][j]) * (x[i][j] - mu[c][j]) / n[c];
    }
    intra += tr / static_cast<double>(k);
  }
  double inter = 0.0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      if (a == b) continue;
      for (std::size_t j = 0; j < d; ++j) inter += (mu[a][j] - mu[b][j]) * (mu[a][j] - mu[b][j]);
    }
  return inter / static_cast<double>(k * (k - 1)) - intra;
}

// 4: separability metric, frequency maps and the lemma checker
Outcome separability() {
  Rng rng(41);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 2 + rng.index(5), d = 1 + rng.index(16);
    std::vector<Embedding> x;
    std::vector<std::size_t> y;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t per = 1 + rng.index(8);
      for (std::size_t i = 0; i < per; ++i) {
        Embedding p(d);
        for (auto& v : p) v = rng.normal() + static_cast<double>(c);
        x.push_back(std::move(p));
        y.push_back(c);
      }
    }
    const double got = cs(LabeledEmbeddingSet(x, y, k)).cs, want = brute_cs(x, y, k);
    if (!(std::abs(got - want) <= kCsTol)) return fail(detail::concat("cs set ", t, ": ", got, " vs ", want));
  }
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 2 + rng.index(4), attrs = 1 + rng.index(12), n = k * (1 + rng.index(6));
    AttributeIndicatorTable table;
    table.thresholds.assign(attrs, 0.0);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < n; ++i) {
      labels.push_back(i % k);
      std::vector<std::uint8_t> row(attrs);
      for (auto& v : row) v = rng.uniform() < 0.5 ? 1 : 0;
      table.f.push_back(row);
    }
    const auto fr = attr_frequencies(table, labels, k);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t a = 0; a < attrs; ++a) {
        double in = 0, n_in = 0, out = 0, n_out = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (labels[i] == c) {
            n_in += 1;
            in += table.f[i][a];
          } else {
            n_out += 1;
            out += table.f[i][a];
          }
        }
        if (fr.U[c][a] != in / n_in || fr.V[c][a] != 1.0 - out / n_out) {
          return fail(detail::concat("frequency table ", t, " class ", c, " attribute ", a));
        }
      }
  }
  const auto ref = read_json(fixtures() / "lemma_reference.json");
  double min_margin = std::numeric_limits<double>::infinity();
  for (const auto& run : ref["runs"]) {
    LemmaConfig cfg;
    cfg.seed = run["seed"].get<std::uint64_t>();
    const auto r = lemma_check(cfg);
    const std::pair<const CheckOutcome*, const char*> checks[] = {
        {&r.lemma1, "lemma1"}, {&r.lemma2, "lemma2"}, {&r.corollary, "corollary"}};
    for (const auto& [c, name] : checks) {
      if (c->status != "holds" || !c->strict) return fail(detail::concat(name, " is ", c->status, " for seed ", cfg.seed));
      if (!(std::abs(c->margin - run[name].get<double>()) <= kLemmaTol)) {
        return fail(detail::concat(name, " margin ", c->margin, " differs from pinned ", run[name].get<double>()));
      }
      min_margin = std::min(min_margin, c->margin);
    }
  }
  return {Outcome::pass, detail::concat("50 cs sets, 50 tables, 5 lemma seeds, smallest margin ", min_margin)};
}

// 5: desk-scale cross-test ordering, recomputed and compared with the committed reference
Outcome desk_scale() {
  ScratchDir dir("crosstest");
  const StudySpec spec = study_spec_from_json(load_flat_config(fixtures() / "studies" / "crosstest.toml"));
  run_study(spec, load_bank(fixtures() / "shapes7_bank.json"), dir.path());
  const auto rows = read_results(dir.path() / "results.jsonl");
  std::map<std::string, double> mean;
  std::map<std::string, std::size_t> n_seeds;
  for (const auto& s : summarize(rows)) {
    mean[s.arm + "/" + s.metric] = s.mean;
    if (s.metric == "test_accuracy") n_seeds[s.arm] = s.n;
  }
  for (const char* arm : {"Attr", "Label", "Label2Attr", "Attr2Label"}) {
    if (n_seeds[arm] != 3) return fail(detail::concat(arm, " has ", n_seeds[arm], " seeds"));
  }
  const double attr = mean["Attr/test_accuracy"], label = mean["Label/test_accuracy"];
  const double l2a = mean["Label2Attr/test_accuracy"], a2l = mean["Attr2Label/test_accuracy"];
  if (!(attr >= label)) return fail(detail::concat("Attr ", attr, " < Label ", label));
  if (!(attr >= mean["Attr/zero_delta_accuracy"])) return fail("Attr below its zero-pattern accuracy");
  if (!(label >= mean["Label/zero_delta_accuracy"])) return fail("Label below its zero-pattern accuracy");
  if (!(l2a <= attr && l2a <= label)) return fail(detail::concat("Label2Attr ", l2a, " exceeds a diagonal"));
  if (!(a2l <= attr && a2l <= label)) return fail(detail::concat("Attr2Label ", a2l, " exceeds a diagonal"));

  std::map<std::string, double> ref;
  const auto doc = read_json(fixtures() / "reference_run.json");
  for (const auto& r : doc["rows"]) {
    if (r["study"] != spec.study) continue;
    ref[detail::concat(r["arm"].get<std::string>(), "/", r["seed"].get<std::uint64_t>(), "/",
                       r["config_hash"].get<std::string>(), "/", r["metric"].get<std::string>())] = r["value"];
  }
  if (ref.size() != rows.size()) return fail(detail::concat(rows.size(), " rows, reference has ", ref.size()));
  for (const auto& r : rows) {
    const auto key = detail::concat(r.arm, "/", r.seed, "/", r.config_hash, "/", r.metric);
    const auto it = ref.find(key);
    if (it == ref.end() || !r.value) return fail("row " + key + " not in the reference run");
    if (!(std::abs(*r.value - it->second) <= kReferenceTol)) {
      return fail(detail::concat(key, " = ", *r.value, ", reference ", it->second));
    }
  }
  return {Outcome::pass, detail::concat("Attr ", attr, ", Label ", label, ", Label2Attr ", l2a, ", Attr2Label ", a2l)};
}

int run_command(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 6: two CLI training runs are bit-identical
Outcome determinism() {
  ScratchDir dir("determinism");
  const std::string bank = (fixtures() / "shapes7_bank.json").string();
  for (const char* name : {"a", "b"}) {
    const std::string cmd = "\"" + std::string(ATTRVR_CLI) + "\" train --bank \"" + bank + "\" --out \"" +
                            (dir.path() / name).string() + "\" > /dev/null 2>&1";
    if (const int code = run_command(cmd); code != 0) return fail(detail::concat("attrvr train exited ", code));
  }
  const std::string pa = slurp(dir.path() / "a" / "pattern.bin"), pb = slurp(dir.path() / "b" / "pattern.bin");
  const std::string ra = slurp(dir.path() / "a" / "results.jsonl"), rb = slurp(dir.path() / "b" / "results.jsonl");
  if (pa.empty() || ra.empty()) return fail("train produced no output");
  if (pa != pb) return fail("pattern checkpoints differ");
  if (ra != rb) return fail("results rows differ");
  return {Outcome::pass, detail::concat("pattern.bin ", pa.size(), " bytes identical, results rows identical")};
}

// 7: offline attribute pipeline
Outcome attribute_pipeline() {
  ScratchDir dir("bank");
  const auto classes = read_lines(fixtures() / "shapes7_classes.txt");
  const auto client = FixtureClient::from_directory(fixtures() / "shapes7_llm");
  GenerationSettings settings;
  settings.seed = 0;
  for (const char* name : {"a.json", "b.json"}) {
    save_bank(generate_bank(classes, "shape", 20, settings, client, {}, 4), dir.path() / name);
  }
  const std::string a = slurp(dir.path() / "a.json");
  if (a != slurp(dir.path() / "b.json")) return fail("two generations differ");
  const AttributeBank bank = load_bank(dir.path() / "a.json");
  if (bank.m != 20 || bank.classes != classes) return fail("wrong bank shape");
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (const auto* list : {&bank.des[c], &bank.dist[c]}) {
      if (list->size() != 20) return fail(detail::concat(classes[c], " has ", list->size(), " entries"));
      for (const auto& s : *list) {
        if (utf8_length(s) <= 20) return fail("entry '" + s + "' has 20 characters or fewer");
      }
    }
  }
  if (a != slurp(fixtures() / "shapes7_bank.json")) return fail("bank differs from the committed fixture");
  return {Outcome::pass, detail::concat(classes.size(), " classes x 20 entries per kind, byte-identical")};
}

// 8: external backend on the pets bank; needs a registered factory plus data paths
Outcome external_pets() {
  if (!external_backend_available()) return skip("no external image-text backend registered");
  const char* manifest = std::getenv("ATTRVR_PETS_MANIFEST");
  const char* bank_path = std::getenv("ATTRVR_PETS_BANK");
  if (manifest == nullptr || bank_path == nullptr) return skip("ATTRVR_PETS_MANIFEST / ATTRVR_PETS_BANK not set");
  RunConfig cfg;
  cfg.backend.kind = "external";
  cfg.data.dataset = manifest;
  const auto backend = make_backend(cfg.backend);
  const auto bank = precompute_embeddings(load_bank(bank_path), *backend);
  const Dataset data = load_dataset(cfg.data, bank.classes, bank.task_info);
  double sum = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    cfg.train.seed = seed;
    cfg.data.data_seed = seed;
    sum += run_single(cfg, bank, data, *backend, ScorerKind::attrvr).test.accuracy;
  }
  const double acc = sum / 3.0;
  if (std::abs(acc - kPetsTarget) > kPetsBand) return fail(detail::concat("mean accuracy ", acc));
  return {Outcome::pass, detail::concat("mean accuracy ", acc)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
    double limit_s;
  };
  const std::vector<Criterion> criteria{
      {1, "mask geometry", geometry, kLimit1},
      {2, "gradient correctness", gradients, kLimit2},
      {3, "scoring identities", scoring, kLimit3},
      {4, "separability oracles", separability, kLimit4},
      {5, "desk-scale ordering", desk_scale, kLimit5},
      {6, "determinism", determinism, 0.0},
      {7, "attribute pipeline offline", attribute_pipeline, 0.0},
      {8, "external backend (optional)", external_pets, 0.0},
  };
  bool ok = true;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.kind == Outcome::pass && c.limit_s > 0.0 && secs > c.limit_s) {
      o = fail(detail::concat("took ", secs, " s, limit ", c.limit_s, " s"));
    }
    const char* tag = o.kind == Outcome::pass ? "PASS" : o.kind == Outcome::skip ? "SKIP" : "FAIL";
    std::cout << "criterion " << c.id << " [" << tag << "] " << c.name << ": " << o.detail << " ("
              << std::fixed << std::setprecision(2) << secs << " s)" << std::defaultfloat << std::endl;
    ok = ok && o.kind != Outcome::fail;
  }
  return ok ? 0 : 1;
}
