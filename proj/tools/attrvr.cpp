// attrvr command line: attribute generation, training, evaluation, studies,
// reports, the separability lemma checker and embedding export.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "attrvr/attrvr.hpp"
#include "attrvr/http_client.hpp"

namespace fs = std::filesystem;
using namespace attrvr;

namespace {

struct Loaded {
  RunConfig cfg;
  std::unique_ptr<EncoderBackend> backend;
  AttributeBank bank;
  Dataset data;
  FewShotSplit split;
};

RunConfig read_run_config(const std::string& path) {
  if (path.empty()) return toy_run_defaults();
  return apply_run_config(load_flat_config(path));
}

Loaded load_all(const std::string& config_path, const std::string& bank_path) {
  Loaded l;
  l.cfg = read_run_config(config_path);
  l.backend = make_backend(l.cfg.backend);
  l.bank = precompute_embeddings(load_bank(bank_path), *l.backend);
  l.data = load_dataset(l.cfg.data, l.bank.classes, l.bank.task_info);
  check_classes(l.data, l.bank);
  l.split = make_splits(l.data, l.cfg.data.shots, l.cfg.data.data_seed, l.cfg.data.val_per_class);
  return l;
}

const std::vector<ImageSample>& pick_split(const FewShotSplit& s, const std::string& which) {
  if (which == "train") return s.train;
  if (which == "val") return s.val;
  if (which == "test") return s.test;
  throw ValidationError("unknown split '" + which + "' (expected train, val or test)");
}

nlohmann::json eval_json(const EvalResult& r, const std::vector<std::string>& classes) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    per[classes[c]] = std::isnan(r.per_class[c]) ? nlohmann::json(nullptr) : nlohmann::json(r.per_class[c]);
  }
  return {{"accuracy", r.accuracy}, {"per_class", per}, {"counts", r.counts}, {"warnings", r.warnings}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attribute-based visual reprogramming"};
  app.require_subcommand(1);

  // generate-attrs
  auto* gen = app.add_subcommand("generate-attrs", "build an attribute bank with a text-generation client");
  std::string task_info, classes_file, gen_out, fixture_dir, endpoint, model = "gpt-3.5-turbo-instruct",
                                                               api_key_env = "ATTRVR_API_KEY";
  std::size_t m = kDefaultAttributesPerClass, concurrency = 1, entries = 25;
  std::uint64_t gen_seed = 0;
  gen->add_option("--task-info", task_info, "task description inserted into prompts")->required();
  gen->add_option("--classes-file", classes_file, "one class name per line")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "bank JSON path (default: $ATTRVR_CACHE_DIR/bank.json)");
  gen->add_option("--fixture", fixture_dir, "replay responses from <dir>/responses.json");
  gen->add_option("--endpoint", endpoint, "OpenAI-compatible base URL for live generation");
  gen->add_option("--model", model, "completion model name");
  gen->add_option("--api-key-env", api_key_env, "environment variable holding the API key");
  gen->add_option("-m", m, "attributes kept per class and kind");
  gen->add_option("--entries", entries, "candidates requested per prompt");
  gen->add_option("--seed", gen_seed, "seed for resampling short candidate lists");
  gen->add_option("--concurrency", concurrency, "classes generated in parallel");

  // train
  auto* tr = app.add_subcommand("train", "train a pattern on a few-shot split");
  std::string config_path, bank_path, out_dir;
  tr->add_option("--config", config_path, "run config (flat key = value)")->check(CLI::ExistingFile);
  tr->add_option("--bank", bank_path, "attribute bank JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out_dir, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a trained pattern");
  std::string pattern_path, scorer_name = "attrvr", split_name = "test";
  ev->add_option("--pattern", pattern_path, "pattern checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--scorer", scorer_name, "attrvr or label");
  ev->add_option("--bank", bank_path, "attribute bank JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--config", config_path, "run config")->check(CLI::ExistingFile);
  ev->add_option("--split", split_name, "train, val or test");

  // zeroshot
  auto* zs = app.add_subcommand("zeroshot", "attribute zero-shot accuracy on resized images, no pattern");
  zs->add_option("--bank", bank_path, "attribute bank JSON")->required()->check(CLI::ExistingFile);
  zs->add_option("--config", config_path, "run config")->check(CLI::ExistingFile);

  // study
  auto* st = app.add_subcommand("study", "run a study grid into a results store");
  std::string spec_path;
  st->add_option("--spec", spec_path, "study spec (flat key = value)")->required()->check(CLI::ExistingFile);
  st->add_option("--out", out_dir, "results directory")->required();
  st->add_option("--bank", bank_path, "attribute bank JSON (overrides the study file's bank key)");

  // report
  auto* rp = app.add_subcommand("report", "summarise a results store");
  std::string results_dir, format = "md", report_out;
  rp->add_option("--results", results_dir, "results directory")->required();
  rp->add_option("--format", format, "md or csv")->check(CLI::IsMember({"md", "csv"}));
  rp->add_option("--out", report_out, "write to a file instead of stdout");

  // lemma-check
  auto* lc = app.add_subcommand("lemma-check", "check the separability lemmas on synthetic embeddings");
  std::string lemma_config, lemma_out, export_dir;
  std::optional<std::uint64_t> lemma_seed;
  lc->add_option("--config", lemma_config, "generator config (flat key = value)")->check(CLI::ExistingFile);
  lc->add_option("--seed", lemma_seed, "generator seed");
  lc->add_option("--out", lemma_out, "report JSON path");
  lc->add_option("--export", export_dir, "also export both embedding sets");

  // export-embeddings
  auto* ex = app.add_subcommand("export-embeddings", "export image embeddings under a trained pattern");
  ex->add_option("--pattern", pattern_path, "pattern checkpoint")->required()->check(CLI::ExistingFile);
  ex->add_option("--bank", bank_path, "attribute bank JSON")->required()->check(CLI::ExistingFile);
  ex->add_option("--config", config_path, "run config")->check(CLI::ExistingFile);
  ex->add_option("--split", split_name, "train, val or test");
  ex->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto classes = read_lines(classes_file);
      GenerationSettings settings;
      settings.seed = gen_seed;
      settings.entries_per_class = entries;
      std::unique_ptr<TextGenerationClient> client;
      if (!fixture_dir.empty()) {
        client = std::make_unique<FixtureClient>(FixtureClient::from_directory(fixture_dir));
      } else if (!endpoint.empty()) {
        client = std::make_unique<HttpCompletionsClient>(HttpClientConfig{endpoint, model, api_key_env, 60});
      } else {
        throw ValidationError("either --fixture or --endpoint is required");
      }
      if (gen_out.empty()) {
        const char* cache = std::getenv("ATTRVR_CACHE_DIR");
        if (cache == nullptr || *cache == '\0') throw ValidationError("--out is required when ATTRVR_CACHE_DIR is unset");
        fs::create_directories(cache);
        gen_out = (fs::path(cache) / "bank.json").string();
      }
      const auto bank = generate_bank(classes, task_info, m, settings, *client, {}, concurrency);
      save_bank(bank, gen_out);
      std::cout << "wrote " << gen_out << " (" << bank.num_classes() << " classes, m=" << bank.m << ")\n";
      return 0;
    }

    if (*tr) {
      Loaded l = load_all(config_path, bank_path);
      const fs::path out(out_dir);
      fs::create_directories(out);
      TrainResult res = train(l.split.train, l.bank, l.cfg.train, *l.backend);
      const std::uint64_t hash = config_hash(l.cfg);
      res.record.config = to_json(l.cfg);
      res.record.config_hash = hash;
      save_checkpoint(out / "pattern.bin", {res.pattern, placement_of(l.cfg.train.method), hash});
      write_record(res.record, out);
      if (res.record.first_trace && res.record.final_trace) {
        std::ofstream first(out / "trace_first.jsonl", std::ios::trunc);
        write_trace_jsonl(first, *res.record.first_trace, l.bank.classes);
        std::ofstream last(out / "trace_final.jsonl", std::ios::trunc);
        write_trace_jsonl(last, *res.record.final_trace, l.bank.classes);
      }
      const ScorerKind kind = l.cfg.train.method == Method::attrvr ? ScorerKind::attrvr : ScorerKind::label;
      const RunOutput run = evaluate_run(res, l.cfg, l.split, l.bank, *l.backend, kind);
      fs::remove(out / "results.jsonl");
      append_results(out / "results.jsonl",
                     result_rows(run, "single", std::string(to_string(l.cfg.train.method)), l.cfg.train.seed, hex64(hash)));
      std::cout << "test accuracy " << run.test.accuracy << " (zero pattern " << run.zero_delta.accuracy
                << "), final train accuracy " << res.record.final_train_accuracy << '\n';
      return 0;
    }

    if (*ev || *ex) {
      Loaded l = load_all(config_path, bank_path);
      const PatternCheckpoint ck = load_checkpoint(pattern_path);
      if (ck.pattern.shape != l.backend->input_shape()) throw GeometryError("pattern geometry does not match the backend");
      const ApplyOptions apply{ck.placement, l.cfg.train.resize_interior, l.cfg.train.clamp};
      const auto& split = pick_split(l.split, split_name);
      if (*ex) {
        const auto files = export_embeddings(ck.pattern, apply, split, *l.backend, out_dir, l.bank.classes);
        std::cout << "wrote " << files.matrix.string() << '\n';
        return 0;
      }
      const auto scorer = make_eval_scorer(parse_scorer(scorer_name), l.cfg.train, l.bank, *l.backend);
      const EvalResult r = evaluate(ck.pattern, apply, split, *scorer, *l.backend);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << eval_json(r, l.bank.classes).dump(2) << '\n';
      return 0;
    }

    if (*zs) {
      Loaded l = load_all(config_path, bank_path);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < l.split.test.size(); ++i) {
        const auto& s = l.split.test[i];
        const auto p = attrzs_predict(s.pixels, l.bank, score_config(l.cfg.train), *l.backend, {kEvalEpoch, i});
        if (p.label == s.label) ++correct;
      }
      std::cout << nlohmann::json{{"accuracy", static_cast<double>(correct) / static_cast<double>(l.split.test.size())},
                                  {"samples", l.split.test.size()}}
                       .dump(2)
                << '\n';
      return 0;
    }

    if (*st) {
      const nlohmann::json raw = load_flat_config(spec_path);
      const StudySpec spec = study_spec_from_json(raw);
      if (bank_path.empty()) {
        if (!raw.contains("bank") || !raw["bank"].is_string()) throw ValidationError("no bank given (--bank or bank = ...)");
        fs::path p = raw["bank"].get<std::string>();
        if (p.is_relative()) p = fs::path(spec_path).parent_path() / p;
        bank_path = p.string();
      }
      const AttributeBank bank = load_bank(bank_path);
      const StudyOutcome o = run_study(spec, bank, out_dir, &std::cerr);
      const auto summary = summarize(read_results(fs::path(out_dir) / "results.jsonl"));
      std::ostringstream md;
      report_markdown(md, summary);
      write_text(fs::path(out_dir) / "summary.md", md.str());
      std::cout << "ran " << o.ran << ", skipped " << o.skipped << ", failed " << o.failed << '\n' << md.str();
      return 0;
    }

    if (*rp) {
      const auto summary = summarize(read_results(fs::path(results_dir) / "results.jsonl"));
      std::ostringstream text;
      if (format == "csv") report_csv(text, summary);
      else report_markdown(text, summary);
      if (report_out.empty()) std::cout << text.str();
      else write_text(report_out, text.str());
      return 0;
    }

    if (*lc) {
      LemmaConfig c = lemma_config.empty() ? LemmaConfig{} : lemma_config_from_json(load_flat_config(lemma_config));
      if (lemma_seed) c.seed = *lemma_seed;
      std::vector<Embedding> za, zl;
      std::vector<std::size_t> labels;
      const LemmaReport rep = lemma_check(c, &za, &zl, &labels);
      const nlohmann::json j = rep.to_json();
      if (!lemma_out.empty()) write_text(lemma_out, j.dump(2) + "\n");
      if (!export_dir.empty()) {
        std::vector<std::string> names;
        for (std::size_t y = 0; y < c.classes; ++y) names.push_back("class" + std::to_string(y));
        write_embeddings(export_dir, "z_attr", za, labels, names);
        write_embeddings(export_dir, "z_label", zl, labels, names);
      }
      bool violated = false;
      for (const char* key : {"lemma1", "lemma2", "corollary"}) {
        const auto& chk = j["checks"][key];
        std::cout << key << ": " << chk["status"].get<std::string>() << (chk["strict"].get<bool>() ? " (strict)" : "")
                  << " margin " << chk["margin"].get<double>() << '\n';
        violated = violated || chk["status"] == "violated";
      }
      std::cout << "cs: attribute " << rep.cs_A << ", label " << rep.cs_L << '\n';
      return violated ? 3 : 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
