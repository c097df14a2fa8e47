// gapbridge: command-line front end over the header library.
//
// Exit codes: 0 success, 1 usage or validation error, 2 I/O or format error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "gapbridge/gapbridge.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gapbridge;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failure on " + path.string());
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void summary(const json& j) { std::cout << j.dump() << std::endl; }

// Threads are capped, not required: every reduction is sequential, so the
// value never changes results.
int configure_threads() {
  const char* env = std::getenv("GAPBRIDGE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ValidationError("GAPBRIDGE_THREADS must be a positive integer");
  Eigen::setNbThreads(static_cast<int>(n));
  return static_cast<int>(n);
}

std::vector<Eigen::Index> parse_dims(const std::string& text, bool& include_global) {
  std::vector<Eigen::Index> dims;
  include_global = false;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "global") {
      include_global = true;
      continue;
    }
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || v < 0) throw ValidationError("--dims: bad entry '" + item + "'");
    dims.push_back(v);
  }
  if (dims.empty() && !include_global) throw ValidationError("--dims selects nothing");
  return dims;
}

std::string escape_line(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\')
      out += "\\\\";
    else if (c == '\n')
      out += "\\n";
    else if (c == '\t')
      out += "\\t";
    else
      out.push_back(c);
  }
  return out;
}

json history_tail(const FittedModel& m) {
  if (m.history.empty()) return nullptr;
  const auto& h = m.history.back();
  return {{"step", h.step},         {"loss_map", h.loss_map},     {"loss_cosine", h.loss_cosine},
          {"loss_cl", h.loss_cl}, {"loss_disti", h.loss_disti}, {"lr", h.lr}};
}

}  // namespace

int main(int argc, char** argv) {
  set_log_sink([](LogLevel level, const std::string& msg) {
    static constexpr const char* names[] = {"debug", "info", "warn"};
    if (level == LogLevel::debug) return;
    std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
  });

  CLI::App app{"gapbridge: modality-gap estimation, mapping and evaluation toolkit"};
  app.require_subcommand(1);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "synthetic texts, planted-bias images, truth and manifest");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  bool gen_renorm = false;
  gen->add_option("--config", gen_config, "synth spec JSON")->required();
  gen->add_option("--out-dir", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "overrides the spec seed");
  gen->add_flag("--renormalize", gen_renorm, "unit-normalize images");

  // estimate
  auto* est = app.add_subcommand("estimate", "closed-form bias estimate from paired data");
  int est_setting = 0;
  std::string est_images, est_texts, est_web_texts, est_corpus, est_out;
  bool est_mean_only = false;
  est->add_option("--setting", est_setting, "1 (paired) or 2 (web pairs + corpus correction)")
      ->required()
      ->check(CLI::IsMember({1, 2}));
  est->add_option("--images", est_images, "image EMB1")->required();
  est->add_option("--texts", est_texts, "text EMB1 paired with --images")->required();
  est->add_option("--web-texts", est_web_texts, "setting 2: web texts paired with --images (default --texts)");
  est->add_option("--corpus-texts", est_corpus, "setting 2: target corpus texts");
  est->add_flag("--mean-only-correction", est_mean_only, "setting 2: keep the web covariance");
  est->add_option("--out", est_out, "params JSON")->required();

  // fit
  auto* fit = app.add_subcommand("fit", "train mapping and reverse mapping");
  int fit_setting = 0;
  std::string fit_corpus, fit_images, fit_params, fit_config, fit_out;
  std::optional<std::uint64_t> fit_seed;
  fit->add_option("--setting", fit_setting, "3 (unpaired images), 4 (text only); 1 or 2 with --params")
      ->required()
      ->check(CLI::IsMember({1, 2, 3, 4}));
  fit->add_option("--corpus", fit_corpus, "corpus text EMB1")->required();
  fit->add_option("--images", fit_images, "setting 3: image pool EMB1");
  fit->add_option("--params", fit_params, "settings 1/2: frozen mapping params JSON");
  fit->add_option("--train-config", fit_config, "TrainConfig JSON")->required();
  fit->add_option("--seed", fit_seed, "overrides the config seed");
  fit->add_option("--out-dir", fit_out, "model directory")->required();

  // map
  auto* map = app.add_subcommand("map", "texts + sampled bias");
  std::string map_params, map_texts, map_out;
  std::uint64_t map_seed = 0;
  bool map_renorm = false;
  map->add_option("--params", map_params, "params JSON")->required();
  map->add_option("--texts", map_texts, "text EMB1")->required();
  map->add_option("--seed", map_seed, "noise seed");
  map->add_flag("--renormalize", map_renorm, "unit-normalize mapped rows");
  map->add_option("--out", map_out, "output EMB1")->required();

  // reverse
  auto* rev = app.add_subcommand("reverse", "apply a trained reverse mapping");
  std::string rev_model, rev_input, rev_out;
  rev->add_option("--model", rev_model, "model directory")->required();
  rev->add_option("--input", rev_input, "input EMB1")->required();
  rev->add_option("--out", rev_out, "output EMB1")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "retrieval / KL / structure metrics on a pair manifest");
  std::string ev_model, ev_pair, ev_report;
  ev->add_option("--model", ev_model, "model directory")->required();
  ev->add_option("--pair", ev_pair, "pair manifest JSON")->required();
  ev->add_option("--report", ev_report, "report JSON")->required();

  // hist
  auto* hist = app.add_subcommand("hist", "residual histograms as CSV");
  std::string hist_pair, hist_dims, hist_out;
  long hist_bins = 50;
  hist->add_option("--pair", hist_pair, "pair manifest JSON")->required();
  hist->add_option("--dims", hist_dims, "comma-separated dims; 'global' adds the pooled series")->required();
  hist->add_option("--bins", hist_bins, "bins per series");
  hist->add_option("--out", hist_out, "CSV path")->required();

  // prompt
  auto* pr = app.add_subcommand("prompt", "stage-2 interactive prompts");
  std::string pr_lexicon, pr_pairs, pr_rough, pr_gt, pr_out;
  double pr_p = 0.1;
  std::uint64_t pr_seed = 0;
  pr->add_option("--lexicon", pr_lexicon, "noun lexicon, one phrase per line")->required();
  auto* pairs_opt = pr->add_option("--pairs", pr_pairs, "TSV: rough<TAB>gt per line");
  auto* rough_opt = pr->add_option("--rough", pr_rough, "single rough caption");
  auto* gt_opt = pr->add_option("--gt", pr_gt, "single ground-truth caption");
  pairs_opt->excludes(rough_opt)->excludes(gt_opt);
  rough_opt->needs(gt_opt);
  gt_opt->needs(rough_opt);
  pr->add_option("--p", pr_p, "padding probability");
  pr->add_option("--seed", pr_seed, "dropout seed");
  pr->add_option("--out", pr_out, "output, one escaped prompt per line")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    const int threads = configure_threads();

    if (*gen) {
      SynthSpec spec = read_json(gen_config).get<SynthSpec>();
      if (gen_seed) spec.seed = *gen_seed;
      spec.validate();
      const fs::path dir(gen_out);
      fs::create_directories(dir);
      const auto texts = gen_text_embeddings(spec);
      const auto truth = gen_bias_truth(spec);
      Rng rng(derive_seed(spec.seed, kStreamPairs));
      const auto images = gen_paired_images(texts, truth, rng, gen_renorm);
      write_embeddings(texts, dir / "texts.emb");
      write_embeddings(images, dir / "images.emb");
      save_params(truth, dir / "truth.json");
      PairManifest{"images.emb", "texts.emb", "by-index"}.save(dir / "pairs.json");
      summary({{"command", "gen-synth"},
               {"dim", spec.dim},
               {"count", spec.count},
               {"seed", spec.seed},
               {"manifest", (dir / "pairs.json").string()},
               {"truth", (dir / "truth.json").string()}});
    } else if (*est) {
      const auto images = read_embeddings(est_images);
      GaussianParams params;
      if (est_setting == 1) {
        const auto texts = read_embeddings(est_texts);
        params = estimate_setting1(images, texts);
      } else {
        if (est_corpus.empty()) throw ValidationError("--setting 2 requires --corpus-texts");
        const auto web_texts = read_embeddings(est_web_texts.empty() ? est_texts : est_web_texts);
        const auto corpus = read_embeddings(est_corpus);
        params = estimate_setting2(images, web_texts, corpus, {est_mean_only});
      }
      ensure_parent(est_out);
      save_params(params, est_out);
      summary({{"command", "estimate"},
               {"setting", est_setting},
               {"dim", params.dim()},
               {"count", images.count()},
               {"mean_norm", params.mean.norm()},
               {"cov_trace", params.covariance().trace()},
               {"out", est_out}});
    } else if (*fit) {
      TrainConfig config = load_train_config(fit_config);
      if (fit_seed) config.seed = *fit_seed;
      const auto corpus = read_embeddings(fit_corpus);
      FittedModel model;
      if (fit_setting == 3) {
        if (fit_images.empty()) throw ValidationError("--setting 3 requires --images");
        model = train_setting3(corpus, read_embeddings(fit_images), config);
      } else if (fit_setting == 4) {
        model = train_setting4(corpus, config);
      } else {
        if (fit_params.empty())
          throw ValidationError("--setting " + std::to_string(fit_setting) + " requires --params");
        const auto params = load_params(fit_params);
        model = train_fixed_mapping(corpus, params, config);
      }
      save_model(model, fit_out);
      summary({{"command", "fit"},
               {"setting", fit_setting},
               {"steps", model.history.size()},
               {"min_chol_diag", model.min_chol_diag},
               {"final", history_tail(model)},
               {"out_dir", fit_out},
               {"threads", threads}});
    } else if (*map) {
      MappingModule module;
      module.params = load_params(map_params);
      module.trainable = module.params.provenance == Provenance::fitted;
      module.renormalize_after_map = map_renorm;
      const auto texts = read_embeddings(map_texts);
      Rng rng(map_seed);
      const auto mapped = map_forward(texts, module, rng);
      ensure_parent(map_out);
      write_embeddings(mapped, map_out);
      summary({{"command", "map"}, {"count", mapped.count()}, {"dim", mapped.dim()}, {"out", map_out}});
    } else if (*rev) {
      const auto model = load_model(rev_model);
      const auto input = read_embeddings(rev_input);
      const Mat out = revmap_forward(input.to_matrix(), model.reverse);
      ensure_parent(rev_out);
      write_embeddings(EmbeddingMatrix::from_matrix(out, false, input.ids()), rev_out);
      summary({{"command", "reverse"}, {"count", input.count()}, {"dim", input.dim()}, {"out", rev_out}});
    } else if (*ev) {
      const auto model = load_model(ev_model);
      const auto [images, texts] = load_paired(PairManifest::load(ev_pair));
      const Mat img = images.to_matrix();
      const Mat txt = texts.to_matrix();
      const Mat recon = revmap_forward(img, model.reverse);
      EvalReport report;
      report.retrieval_at_1 = retrieval_accuracy(recon, txt, 1);
      report.retrieval_at_5 = retrieval_accuracy(recon, txt, std::min<Eigen::Index>(5, txt.rows()));
      report.residual_kl = residual_kl(img, txt, model.mapping.params);
      report.simmatrix_div = simmatrix_divergence(recon, txt);
      report.mean_pair_cosine = mean_pair_cosine(recon, txt);
      report.notes = "queries: reverse(images); targets: texts; mapping provenance " +
                     std::string(to_string(model.mapping.params.provenance));
      ensure_parent(ev_report);
      write_text(ev_report, json(report).dump(2) + "\n");
      json s = report;
      s["command"] = "eval";
      s["pairs"] = images.count();
      summary(s);
    } else if (*hist) {
      bool include_global = false;
      const auto dims = parse_dims(hist_dims, include_global);
      const auto [images, texts] = load_paired(PairManifest::load(hist_pair));
      const auto bins =
          export_residual_histograms(images.to_matrix(), texts.to_matrix(), dims, hist_bins, include_global);
      std::ostringstream csv;
      write_histogram_csv(bins, csv);
      ensure_parent(hist_out);
      write_text(hist_out, csv.str());
      summary({{"command", "hist"}, {"rows", bins.size()}, {"pairs", images.count()}, {"out", hist_out}});
    } else if (*pr) {
      const auto lexicon = NounLexicon::load(pr_lexicon);
      std::vector<std::pair<std::string, std::string>> pairs;
      if (!pr_pairs.empty()) {
        std::ifstream in(pr_pairs);
        if (!in) throw IoError("cannot open " + pr_pairs);
        std::string line;
        long lineno = 0;
        while (std::getline(in, line)) {
          ++lineno;
          if (!line.empty() && line.back() == '\r') line.pop_back();
          if (line.empty()) continue;
          const auto tab = line.find('\t');
          if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
            throw FormatError(pr_pairs + ":" + std::to_string(lineno) + ": expected two tab-separated columns");
          pairs.emplace_back(line.substr(0, tab), line.substr(tab + 1));
        }
      } else if (*rough_opt) {
        pairs.emplace_back(pr_rough, pr_gt);
      } else {
        throw ValidationError("prompt needs --pairs or --rough/--gt");
      }
      Rng rng(pr_seed);
      std::string out;
      long padded = 0;
      for (const auto& [rough, gt] : pairs) {
        const auto rec = stage2_prompt_or_padding(rough, gt, lexicon, pr_p, rng);
        padded += rec.padded;
        out += escape_line(rec.serialized);
        out.push_back('\n');
      }
      ensure_parent(pr_out);
      write_text(pr_out, out);
      summary({{"command", "prompt"}, {"records", pairs.size()}, {"padded", padded}, {"out", pr_out}});
    }
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return 0;
}
