// nmtdesk: command-line entry point for corpus preparation, training,
// translation, evaluation and the adequacy/fluency rating service.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

#include <openssl/evp.h>
#include <pthread.h>
#include <signal.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nmtdesk/checkpoint.hpp"
#include "nmtdesk/corpus.hpp"
#include "nmtdesk/decode.hpp"
#include "nmtdesk/evaluation.hpp"
#include "nmtdesk/training.hpp"
// After Eigen: httplib pulls in <resolv.h>, whose _res macro clashes with it.
#include "nmtdesk/afeval/service.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace nmtdesk;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct Globals {
  bool json = false;
  std::size_t threads = 0;  // 0: all available cores
  std::string command_line;

  std::size_t thread_count() const {
    if (threads > 0) return threads;
    return std::max(1u, std::thread::hardware_concurrency());
  }
};

// ---------------------------------------------------------------------------
// Run manifests

std::string sha256_file(const std::string& path) {
  const std::string bytes = read_file(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::kInternal, "sha256 failed for '" + path + "'");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

class Manifest {
 public:
  Manifest(const Globals& g, std::string command) : g_(g), command_(std::move(command)), started_(afeval::utc_timestamp()) {}

  void input(const std::string& path) {
    if (!path.empty()) inputs_.push_back(path);
  }
  void config(const std::string& key, ordered_json value) { config_[key] = std::move(value); }
  void seed(const std::string& key, std::uint64_t value) { seeds_[key] = value; }

  /// Writes <output>.manifest.json.
  void write_for(const std::string& output) const {
    ordered_json j;
    j["tool"] = "nmtdesk";
    j["tool_version"] = kToolVersion;
    j["command"] = command_;
    j["command_line"] = g_.command_line;
    j["output"] = output;
    j["config"] = config_.is_null() ? ordered_json::object() : config_;
    j["seeds"] = seeds_.is_null() ? ordered_json::object() : seeds_;
    ordered_json inputs = ordered_json::array();
    for (const std::string& p : inputs_) inputs.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    j["inputs"] = inputs;
    j["threads"] = g_.thread_count();
    j["started_at"] = started_;
    j["finished_at"] = afeval::utc_timestamp();
    write_file(output + ".manifest.json", j.dump(2) + "\n");
  }

 private:
  const Globals& g_;
  std::string command_;
  std::string started_;
  ordered_json config_;
  ordered_json seeds_;
  std::vector<std::string> inputs_;
};

std::map<std::string, std::string> read_config(const std::string& path) {
  return parse_key_values(read_file(path));
}

/// "key=value" overrides from --set.
void apply_overrides(std::map<std::string, std::string>& kv, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorKind::kUsage, "--set expects key=value, got '" + s + "'");
    auto trimmed = parse_key_values(s);
    for (auto& [k, v] : trimmed) kv[k] = v;
  }
}

ordered_json kv_json(const std::map<std::string, std::string>& kv) {
  ordered_json j = ordered_json::object();
  for (const auto& [k, v] : kv) j[k] = v;
  return j;
}

// ---------------------------------------------------------------------------
// corpus

struct CorpusArgs {
  std::string src, tgt, out, out_src, out_tgt, language_pair;
  std::string src_label = "source", tgt_label = "target";
  std::string side = "source";
  std::size_t vocab_size = kDefaultVocabLimit;
  std::size_t max_len = 50;
  std::size_t dev_size = 10000, test_size = 10000;
  std::uint64_t seed = 1;
  bool exact = false;
  std::string in;
};

Side parse_side(const std::string& s) {
  if (s == "source" || s == "src") return Side::kSource;
  if (s == "target" || s == "tgt") return Side::kTarget;
  fail(ErrorKind::kUsage, "--side must be source or target");
}

int corpus_stats_cmd(const Globals& g, const CorpusArgs& a) {
  const ParallelCorpus c = read_parallel(a.src, a.tgt, a.language_pair);
  const CorpusStats s = corpus_stats(c, Side::kSource), t = corpus_stats(c, Side::kTarget);
  std::string text;
  if (g.json) {
    auto row = [](const CorpusStats& st) {
      return ordered_json{{"sentences", st.sentence_count}, {"words", st.word_count}, {"vocab", st.vocab_size}, {"asl", st.asl()}};
    };
    ordered_json j;
    j["language_pair"] = a.language_pair;
    j[a.src_label] = row(s);
    j[a.tgt_label] = row(t);
    text = j.dump(2) + "\n";
  } else {
    text = format_stats_table({{a.src_label, s}, {a.tgt_label, t}}, a.exact);
    if (!a.language_pair.empty()) text = a.language_pair + "\n" + text;
  }
  std::cout << text;
  if (!a.out.empty()) {
    write_file(a.out, text);
    Manifest m(g, "corpus stats");
    m.input(a.src);
    m.input(a.tgt);
    m.write_for(a.out);
  }
  return 0;
}

int corpus_tokenize_cmd(const Globals& g, const CorpusArgs& a) {
  std::vector<std::string> out;
  for (const std::string& line : read_lines(a.in)) {
    const Sentence s = tokenize(line);
    std::string joined;
    for (std::size_t i = 0; i < s.tokens.size(); ++i) joined += (i ? " " : "") + s.tokens[i];
    out.push_back(joined);
  }
  write_lines(a.out, out);
  Manifest m(g, "corpus tokenize");
  m.input(a.in);
  m.write_for(a.out);
  return 0;
}

int corpus_vocab_cmd(const Globals& g, const CorpusArgs& a) {
  const ParallelCorpus c = read_parallel(a.src, a.tgt, a.language_pair);
  const Vocabulary v = build_vocabulary(c, parse_side(a.side), a.vocab_size);
  write_file(a.out, v.serialize());
  Manifest m(g, "corpus vocab");
  m.input(a.src);
  m.input(a.tgt);
  m.config("side", a.side);
  m.config("vocab_size", a.vocab_size);
  m.write_for(a.out);
  std::cerr << "vocabulary: " << v.size() << " entries (including specials)\n";
  return 0;
}

int corpus_filter_cmd(const Globals& g, const CorpusArgs& a) {
  const ParallelCorpus c = read_parallel(a.src, a.tgt, a.language_pair);
  const ParallelCorpus f = filter_by_length(c, a.max_len);
  write_parallel(f, a.out_src, a.out_tgt);
  Manifest m(g, "corpus filter");
  m.input(a.src);
  m.input(a.tgt);
  m.config("max_len", a.max_len);
  m.write_for(a.out_src);
  std::cerr << "kept " << f.size() << " of " << c.size() << " pairs\n";
  return 0;
}

int corpus_split_cmd(const Globals& g, const CorpusArgs& a) {
  const ParallelCorpus c = read_parallel(a.src, a.tgt, a.language_pair);
  const CorpusSplit s = split_corpus(c, a.dev_size, a.test_size, a.seed);
  const std::string prefix = a.out;
  write_parallel(s.train, prefix + ".train.src", prefix + ".train.tgt");
  write_parallel(s.dev, prefix + ".dev.src", prefix + ".dev.tgt");
  write_parallel(s.test, prefix + ".test.src", prefix + ".test.tgt");
  Manifest m(g, "corpus split");
  m.input(a.src);
  m.input(a.tgt);
  m.config("dev_size", a.dev_size);
  m.config("test_size", a.test_size);
  m.seed("split", a.seed);
  m.write_for(prefix + ".train.src");
  std::cerr << "train " << s.train.size() << ", dev " << s.dev.size() << ", test " << s.test.size() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string out_dir;
  std::vector<std::string> sets;
  std::optional<std::size_t> max_epochs, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

/// Data keys: either train_src/train_tgt/dev_src/dev_tgt, or task = reversal
/// with task_pairs, task_dev, task_vocab, task_min_len, task_max_len, task_seed.
struct DataSpec {
  ParallelCorpus train, dev;
  std::vector<std::string> inputs;
};

DataSpec load_training_data(const std::map<std::string, std::string>& kv) {
  auto get = [&kv](const std::string& k, const std::string& def) {
    auto it = kv.find(k);
    return it == kv.end() ? def : it->second;
  };
  DataSpec d;
  const std::string task = get("task", "");
  if (task == "reversal") {
    const std::size_t pairs = detail::parse_size("task_pairs", get("task_pairs", "2000"));
    const std::size_t dev = detail::parse_size("task_dev", get("task_dev", "200"));
    const ParallelCorpus all = make_reversal_task(
        pairs + dev, detail::parse_size("task_vocab", get("task_vocab", "30")),
        detail::parse_size("task_min_len", get("task_min_len", "3")),
        detail::parse_size("task_max_len", get("task_max_len", "10")),
        detail::parse_size("task_seed", get("task_seed", "7")));
    d.train.language_pair = d.dev.language_pair = all.language_pair;
    d.train.pairs.assign(all.pairs.begin(), all.pairs.begin() + static_cast<std::ptrdiff_t>(pairs));
    d.dev.pairs.assign(all.pairs.begin() + static_cast<std::ptrdiff_t>(pairs), all.pairs.end());
    return d;
  }
  if (!task.empty()) fail(ErrorKind::kUsage, "unknown task '" + task + "' (expected reversal)");
  for (const char* k : {"train_src", "train_tgt", "dev_src", "dev_tgt"}) {
    if (get(k, "").empty()) fail(ErrorKind::kUsage, std::string("config is missing '") + k + "' (or task = reversal)");
    d.inputs.push_back(get(k, ""));
  }
  const std::string lp = get("language_pair", "");
  d.train = read_parallel(get("train_src", ""), get("train_tgt", ""), lp);
  d.dev = read_parallel(get("dev_src", ""), get("dev_tgt", ""), lp);
  return d;
}

int train_cmd(const Globals& g, const TrainArgs& a) {
  std::map<std::string, std::string> kv;
  if (!a.config.empty()) kv = read_config(a.config);
  apply_overrides(kv, a.sets);
  if (a.max_epochs) kv["max_epochs"] = std::to_string(*a.max_epochs);
  if (a.batch_size) kv["batch_size"] = std::to_string(*a.batch_size);
  if (a.lr) {
    std::ostringstream s;
    s.precision(17);
    s << *a.lr;
    kv["initial_lr"] = s.str();
  }
  if (a.seed) kv["seed"] = std::to_string(*a.seed);
  std::string out_dir = a.out_dir;
  if (out_dir.empty()) out_dir = kv.count("out_dir") ? kv["out_dir"] : "";
  if (out_dir.empty()) fail(ErrorKind::kUsage, "no output directory: pass --out-dir or set out_dir in the config");

  ModelConfig cfg;
  cfg.apply(kv);
  TrainConfig tcfg;
  tcfg.apply(kv);
  if (!kv.count("threads")) tcfg.threads = g.thread_count();
  tcfg.validate();
  fs::create_directories(out_dir);
  tcfg.checkpoint_dir = (fs::path(out_dir) / "checkpoints").string();
  tcfg.history_path = (fs::path(out_dir) / "history.jsonl").string();

  const DataSpec data = load_training_data(kv);
  const PreparedData prepared = prepare_data(data.train, data.dev, cfg);
  std::cerr << "training pairs " << prepared.train.size() << ", dev pairs " << prepared.dev.pairs.size()
            << ", vocab " << cfg.src_vocab << "/" << cfg.tgt_vocab << ", parameters " << param_count(cfg) << "\n";
  const TrainResult r = train(prepared, cfg, tcfg, &std::cerr);

  // The final model is the checkpoint of the best validation-BLEU epoch.
  const std::string model_path = (fs::path(out_dir) / "model.ckpt").string();
  fs::copy_file(r.checkpoints.at(r.best_epoch - 1), model_path, fs::copy_options::overwrite_existing);

  Manifest m(g, "train");
  for (const std::string& p : data.inputs) m.input(p);
  if (!a.config.empty()) m.input(a.config);
  m.config("settings", kv_json(kv));
  m.config("model", kv_json(parse_key_values(cfg.to_key_values())));
  m.seed("train", tcfg.seed);
  m.write_for(model_path);
  m.write_for(tcfg.history_path);

  ordered_json summary;
  summary["model"] = model_path;
  summary["history"] = tcfg.history_path;
  summary["epochs"] = r.state.history.size();
  summary["best_epoch"] = r.best_epoch;
  summary["stop_reason"] = r.stop_reason;
  const EpochRecord& best = r.state.history.at(r.best_epoch - 1);
  summary["best_val_bleu"] = best.val_bleu;
  summary["best_val_ppl"] = best.val_ppl;
  if (g.json) {
    std::cout << summary.dump(2) << "\n";
  } else {
    std::printf("model %s (epoch %zu, val_ppl %.4f, val_bleu %.2f); %s\n", model_path.c_str(), r.best_epoch,
                best.val_ppl, best.val_bleu, r.stop_reason.c_str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// translate

struct TranslateArgs {
  std::string model, in, out, sidecar;
  std::size_t beam = 1;
  double max_len_factor = kDefaultMaxLenFactor;
  bool no_unk_replace = false;
};

int translate_cmd(const Globals& g, const TranslateArgs& a) {
  if (a.beam < 1) fail(ErrorKind::kUsage, "--beam must be >= 1");
  if (!(a.max_len_factor > 0.0)) fail(ErrorKind::kUsage, "--max-len-factor must be > 0");
  const ModelBundle model = load_checkpoint(a.model);
  TranslateOptions opt;
  opt.beam = a.beam;
  opt.decode.max_len_factor = a.max_len_factor;
  opt.unk_replace = !a.no_unk_replace;
  opt.threads = g.thread_count();
  translate_file(model, a.in, a.out, opt, a.sidecar);
  Manifest m(g, "translate");
  m.input(a.model);
  m.input(a.in);
  m.config("beam", a.beam);
  m.config("max_len_factor", a.max_len_factor);
  m.config("unk_replace", opt.unk_replace);
  m.write_for(a.out);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string hyp, ref, src, out;
  std::size_t bins = 10;
  bool no_truecase = false;
};

struct EvalSides {
  std::vector<Sentence> hyps, refs;
};

EvalSides load_eval_sides(const EvalArgs& a) {
  const std::vector<std::string> hyp = read_lines(a.hyp), ref = read_lines(a.ref);
  if (hyp.size() != ref.size()) {
    fail(ErrorKind::kLengthMismatch, "'" + a.hyp + "' has " + std::to_string(hyp.size()) + " lines but '" + a.ref +
                                         "' has " + std::to_string(ref.size()));
  }
  EvalProtocol protocol;
  protocol.truecase = !a.no_truecase;
  const std::optional<Truecaser> tc = protocol.truecase ? eval_truecaser(ref) : std::nullopt;
  const Truecaser* tcp = tc ? &*tc : nullptr;
  return {prepare_eval_side(hyp, tcp, protocol), prepare_eval_side(ref, tcp, protocol)};
}

void emit_eval_output(const Globals& g, const EvalArgs& a, const std::string& command, const std::string& text) {
  std::cout << text;
  if (a.out.empty()) return;
  write_file(a.out, text);
  Manifest m(g, command);
  m.input(a.hyp);
  m.input(a.ref);
  m.input(a.src);
  m.config("truecase", !a.no_truecase);
  m.write_for(a.out);
}

int eval_bleu_cmd(const Globals& g, const EvalArgs& a) {
  const EvalSides s = load_eval_sides(a);
  const BleuReport r = bleu_corpus(s.hyps, s.refs);
  emit_eval_output(g, a, "eval bleu", g.json ? canonical_json(to_json(r)) : format_bleu(r) + "\n");
  return 0;
}

int eval_wer_cmd(const Globals& g, const EvalArgs& a) {
  const EvalSides s = load_eval_sides(a);
  const WerReport r = wer_corpus(s.hyps, s.refs);
  char buf[128];
  std::snprintf(buf, sizeof buf, "WER = %.4f (neg_WER = %.4f)\n", r.wer, r.neg_wer);
  emit_eval_output(g, a, "eval wer", g.json ? canonical_json(to_json(r)) : std::string(buf));
  return 0;
}

int eval_length_bins_cmd(const Globals& g, const EvalArgs& a) {
  if (a.bins < 1) fail(ErrorKind::kUsage, "--bins must be >= 1");
  const EvalSides s = load_eval_sides(a);
  std::vector<Sentence> sources;
  for (const std::string& line : read_lines(a.src)) sources.push_back(tokenize(line));
  const LengthBinReport r = binned_quality(s.hyps, s.refs, sources, a.bins);
  const std::string text = g.json ? canonical_json(to_json(r)) : length_bins_csv(r);
  if (a.out.empty()) {
    std::cout << text;
    return 0;
  }
  write_file(a.out, text);
  Manifest m(g, "eval length-bins");
  m.input(a.hyp);
  m.input(a.ref);
  m.input(a.src);
  m.config("bins", a.bins);
  m.config("truecase", !a.no_truecase);
  m.write_for(a.out);
  return 0;
}

// ---------------------------------------------------------------------------
// af

struct AfArgs {
  std::string log, host = "127.0.0.1", static_dir, campaign, spec, sources, language_pair, out;
  int port = 8080;
  bool csv = false;
  std::vector<std::string> systems;
  std::vector<std::string> evaluators;
  std::optional<std::size_t> sample_size;
  std::optional<std::uint64_t> seed;
};

int af_serve_cmd(const Globals& g, const AfArgs& a) {
  afeval::AfService svc(a.log);
  httplib::Server server;
  server.new_task_queue = [n = g.thread_count()] { return new httplib::ThreadPool(std::max<std::size_t>(n, 2)); };
  afeval::make_http_routes(server, svc, a.static_dir);

  // SIGINT/SIGTERM stop the server from a dedicated thread.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::thread stopper([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  stopper.detach();

  if (!server.bind_to_port(a.host, a.port)) {
    fail(ErrorKind::kIo, "cannot bind " + a.host + ":" + std::to_string(a.port));
  }
  std::cerr << "serving " << svc.snapshot()->campaigns.size() << " campaign(s) from " << a.log << " on http://"
            << a.host << ":" << a.port << "\n";
  server.listen_after_bind();
  return 0;
}

int af_create_cmd(const Globals& g, const AfArgs& a) {
  afeval::CampaignSpec spec;
  Manifest m(g, "af create");
  if (!a.spec.empty()) {
    spec = afeval::campaign_spec_from_json(nlohmann::json::parse(read_file(a.spec)));
    m.input(a.spec);
  } else {
    if (a.sources.empty() || a.systems.empty()) fail(ErrorKind::kUsage, "pass --spec, or --sources and --system");
    spec.sources = read_lines(a.sources);
    m.input(a.sources);
    for (const std::string& s : a.systems) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) fail(ErrorKind::kUsage, "--system expects LABEL=FILE, got '" + s + "'");
      spec.systems.push_back({s.substr(0, eq), read_lines(s.substr(eq + 1))});
      m.input(s.substr(eq + 1));
    }
    spec.language_pair = a.language_pair;
    if (!a.evaluators.empty()) spec.evaluators = a.evaluators;
  }
  if (a.sample_size) spec.sample_size = *a.sample_size;
  if (a.seed) spec.seed = *a.seed;
  afeval::AfService svc(a.log);
  const std::string id = svc.create(spec);
  const afeval::Campaign& c = svc.snapshot()->get(id).campaign;
  m.config("sample_size", spec.sample_size);
  m.config("evaluators", spec.evaluators);
  m.seed("campaign", spec.seed);
  // The campaign lives in the event log; its manifest sits beside the log's events directory.
  m.write_for((fs::path(a.log) / id).string());
  if (g.json) {
    std::cout << ordered_json{{"campaign_id", id}, {"items", c.items.size()}, {"systems", c.systems.size()},
                              {"evaluators", c.evaluators}}
                     .dump(2)
              << "\n";
  } else {
    std::cout << id << "\n";
  }
  return 0;
}

int af_report_cmd(const Globals& g, const AfArgs& a) {
  if (!fs::is_directory(fs::path(a.log) / "events")) fail(ErrorKind::kIo, "no event log under '" + a.log + "'");
  afeval::AfService svc(a.log);
  const afeval::AFReport r = svc.report(a.campaign);
  const std::string text = g.json ? afeval::to_json(r).dump(2) + "\n" : a.csv ? afeval::format_csv(r) : afeval::format_table(r);
  std::cout << text;
  if (!a.out.empty()) {
    write_file(a.out, text);
    Manifest m(g, "af report");
    m.config("campaign", a.campaign);
    m.write_for(a.out);
  }
  return 0;
}

// ---------------------------------------------------------------------------

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kUsage:
      return 1;
    case ErrorKind::kInternal:
      return 3;
    default:
      return 2;
  }
}

std::string join_argv(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  Globals g;
  g.command_line = join_argv(argc, argv);

  CLI::App app{"nmtdesk: desk-scale neural machine translation workbench"};
  app.set_version_flag("--version", kToolVersion);
  app.add_flag("--json", g.json, "Machine-readable JSON output on stdout");
  app.add_option("--threads", g.threads, "Worker threads (default: all available cores)")->check(CLI::NonNegativeNumber);
  app.require_subcommand(1);
  app.fallthrough();

  // corpus
  CorpusArgs ca;
  auto* corpus = app.add_subcommand("corpus", "Corpus preparation");
  corpus->require_subcommand(1);
  auto add_parallel = [&ca](CLI::App* c) {
    c->add_option("--src", ca.src, "Source-side text file, one segment per line")->required();
    c->add_option("--tgt", ca.tgt, "Target-side text file, line-aligned with --src")->required();
    c->add_option("--language-pair", ca.language_pair, "Language pair label, e.g. en-de");
  };
  auto* stats = corpus->add_subcommand("stats", "Sentence, word, vocabulary and ASL counts per side");
  add_parallel(stats);
  stats->add_option("--src-label", ca.src_label, "Row label for the source side");
  stats->add_option("--tgt-label", ca.tgt_label, "Row label for the target side");
  stats->add_flag("--exact", ca.exact, "Print exact counts instead of K/M abbreviations");
  stats->add_option("--out", ca.out, "Also write the table to this file");
  auto* tok = corpus->add_subcommand("tokenize", "Tokenize a text file (tokens joined by single spaces)");
  tok->add_option("--in", ca.in, "Input text file")->required();
  tok->add_option("--out", ca.out, "Output file")->required();
  auto* vocab = corpus->add_subcommand("vocab", "Build a ranked vocabulary file");
  add_parallel(vocab);
  vocab->add_option("--side", ca.side, "source or target")->check(CLI::IsMember({"source", "target", "src", "tgt"}));
  vocab->add_option("--size", ca.vocab_size, "Number of regular words kept (specials excluded)");
  vocab->add_option("--out", ca.out, "Vocabulary output file")->required();
  auto* split = corpus->add_subcommand("split", "Seeded train/dev/test split");
  add_parallel(split);
  split->add_option("--dev", ca.dev_size, "Dev set size");
  split->add_option("--test", ca.test_size, "Test set size");
  split->add_option("--seed", ca.seed, "Shuffle seed");
  split->add_option("--out", ca.out, "Output prefix: writes PREFIX.{train,dev,test}.{src,tgt}")->required();
  auto* filter = corpus->add_subcommand("filter", "Drop pairs longer than --max-len tokens on either side");
  add_parallel(filter);
  filter->add_option("--max-len", ca.max_len, "Maximum tokens per side");
  filter->add_option("--out-src", ca.out_src, "Filtered source output")->required();
  filter->add_option("--out-tgt", ca.out_tgt, "Filtered target output")->required();

  // train
  TrainArgs ta;
  auto* train_app = app.add_subcommand("train", "Train a model from a key = value config file");
  train_app->add_option("--config", ta.config, "Config file (model, training and data keys)")->required();
  train_app->add_option("--out-dir", ta.out_dir, "Output directory (overrides out_dir)");
  train_app->add_option("--set", ta.sets, "Override a config key: --set key=value (repeatable)");
  train_app->add_option("--max-epochs", ta.max_epochs, "Overrides max_epochs");
  train_app->add_option("--batch-size", ta.batch_size, "Overrides batch_size");
  train_app->add_option("--lr", ta.lr, "Overrides initial_lr");
  train_app->add_option("--seed", ta.seed, "Overrides seed");

  // translate
  TranslateArgs tr;
  auto* translate = app.add_subcommand("translate", "Translate a file line by line");
  translate->add_option("--model", tr.model, "Checkpoint file")->required();
  translate->add_option("--in", tr.in, "Source text, one segment per line")->required();
  translate->add_option("--out", tr.out, "Output translations")->required();
  translate->add_option("--beam", tr.beam, "Beam width (1 = greedy)");
  translate->add_option("--max-len-factor", tr.max_len_factor, "Output length cap as a multiple of source length");
  translate->add_option("--attn-sidecar", tr.sidecar, "Write per-line attention matrices (JSON lines)");
  translate->add_flag("--no-unk-replace", tr.no_unk_replace, "Keep <unk> tokens in the output");

  // eval
  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score hypotheses against references");
  eval->require_subcommand(1);
  auto add_eval = [&ea](CLI::App* c) {
    c->add_option("--hyp", ea.hyp, "Hypothesis file (detokenized)")->required();
    c->add_option("--ref", ea.ref, "Reference file (detokenized, line-aligned)")->required();
    c->add_flag("--no-truecase", ea.no_truecase, "Score the text as cased, without truecasing");
  };
  auto* bleu = eval->add_subcommand("bleu", "Corpus BLEU");
  add_eval(bleu);
  bleu->add_option("--out", ea.out, "Also write the report to this file");
  auto* wer = eval->add_subcommand("wer", "Corpus word error rate");
  add_eval(wer);
  wer->add_option("--out", ea.out, "Also write the report to this file");
  auto* bins = eval->add_subcommand("length-bins", "BLEU and negative WER per source-length bin");
  add_eval(bins);
  bins->add_option("--src", ea.src, "Source file (detokenized, line-aligned)")->required();
  bins->add_option("--bins", ea.bins, "Number of equal-count bins");
  bins->add_option("--out", ea.out, "CSV report (JSON with --json); stdout when omitted");

  // af
  AfArgs aa;
  auto* af = app.add_subcommand("af", "Blinded adequacy/fluency rating campaigns");
  af->require_subcommand(1);
  auto* serve = af->add_subcommand("serve", "Run the rating service over HTTP");
  serve->add_option("--log", aa.log, "Event log directory")->required();
  serve->add_option("--port", aa.port, "TCP port")->check(CLI::Range(0, 65535));
  serve->add_option("--host", aa.host, "Bind address");
  serve->add_option("--static", aa.static_dir, "Directory served at / (rater UI bundle)");
  auto* create = af->add_subcommand("create", "Create a campaign in the event log");
  create->add_option("--log", aa.log, "Event log directory")->required();
  create->add_option("--spec", aa.spec, "JSON campaign spec (same body as POST /api/v1/campaigns)");
  create->add_option("--sources", aa.sources, "Source lines file");
  create->add_option("--system", aa.systems, "LABEL=FILE system output (repeatable)");
  create->add_option("--language-pair", aa.language_pair, "Language pair label");
  create->add_option("--evaluators", aa.evaluators, "Evaluator ids (default e1 e2 e3)")->delimiter(',');
  create->add_option("--sample-size", aa.sample_size, "Items sampled (default 150)");
  create->add_option("--seed", aa.seed, "Sampling and blinding seed");
  auto* report = af->add_subcommand("report", "Aggregate a campaign's ratings");
  report->add_option("--log", aa.log, "Event log directory")->required();
  report->add_option("--campaign", aa.campaign, "Campaign id")->required();
  report->add_flag("--csv", aa.csv, "CSV instead of the tab-separated table");
  report->add_option("--out", aa.out, "Also write the report to this file");

  if (argc <= 1) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* deepest = &app;
    for (;;) {
      auto subs = deepest->get_subcommands();
      if (subs.empty()) break;
      deepest = subs.front();
    }
    std::cerr << deepest->help();
    return 1;
  }

  try {
    if (*stats) return corpus_stats_cmd(g, ca);
    if (*tok) return corpus_tokenize_cmd(g, ca);
    if (*vocab) return corpus_vocab_cmd(g, ca);
    if (*split) return corpus_split_cmd(g, ca);
    if (*filter) return corpus_filter_cmd(g, ca);
    if (*train_app) return train_cmd(g, ta);
    if (*translate) return translate_cmd(g, tr);
    if (*bleu) return eval_bleu_cmd(g, ea);
    if (*wer) return eval_wer_cmd(g, ea);
    if (*bins) return eval_length_bins_cmd(g, ea);
    if (*serve) return af_serve_cmd(g, aa);
    if (*create) return af_create_cmd(g, aa);
    if (*report) return af_report_cmd(g, aa);
    std::cerr << app.help();
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: Format: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: Io: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << e.what() << "\n";
    return 3;
  }
}
