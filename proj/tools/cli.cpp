#include "cli.hpp"

#include "kvshrink/analysis.hpp"
#include "kvshrink/calibration.hpp"
#include "kvshrink/checkpoint.hpp"
#include "kvshrink/compress.hpp"
#include "kvshrink/errors.hpp"
#include "kvshrink/eval.hpp"
#include "kvshrink/log.hpp"
#include "kvshrink/model.hpp"
#include "kvshrink/tokenizer.hpp"
#include "kvshrink/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open file: " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TrainOpts {
    std::string config_path;
    std::string corpus_path;
    std::string out_path;
    std::string log_path;
    TrainConfig tc;
};

void add_train_flags(CLI::App* cmd, TrainOpts& o) {
    cmd->add_option("--corpus", o.corpus_path, "Corpus file (raw bytes)")
        ->required();
    cmd->add_option("--out", o.out_path, "Output checkpoint path")->required();
    cmd->add_option("--steps", o.tc.steps, "Optimizer steps");
    cmd->add_option("--seed", o.tc.seed, "RNG seed (reproduces the run exactly)");
    cmd->add_option("--threads", o.tc.threads, "Worker thread cap");
    cmd->add_option("--lr", o.tc.learning_rate, "Learning rate");
    cmd->add_option("--batch-size", o.tc.batch_size, "Sequences per step");
    cmd->add_option("--seq-len", o.tc.seq_len, "Training window length");
    cmd->add_option("--log", o.log_path,
                    "Per-step CSV log (step,loss,grad_norm)");
}

void run_train(const TrainOpts& o, std::ostream& out) {
    ModelConfig mc = config_from_json(slurp(o.config_path));
    Checkpoint init = init_checkpoint(mc, o.tc.seed);
    TrainConfig tc = o.tc;
    tc.log_path = o.log_path;
    log_info("training " + std::to_string(tc.steps) + " steps");
    Checkpoint trained = train(init, read_corpus(o.corpus_path), tc);
    save_checkpoint(trained, o.out_path);
    out << "wrote " << o.out_path << " (hash 0x" << std::hex
        << checkpoint_hash(trained) << std::dec << ")\n";
}

void run_finetune(const TrainOpts& o, const std::string& ckpt_path,
                  std::ostream& out) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    TrainConfig tc = o.tc;
    tc.log_path = o.log_path;
    log_info("fine-tuning " + std::to_string(tc.steps) + " steps");
    Checkpoint tuned = finetune(ckpt, read_corpus(o.corpus_path), tc);
    save_checkpoint(tuned, o.out_path);
    out << "wrote " << o.out_path << " (hash 0x" << std::hex
        << checkpoint_hash(tuned) << std::dec << ")\n";
}

void emit_record(const EvalRecord& rec, const std::string& out_path,
                 std::ostream& out) {
    std::string line = eval_record_json(rec);
    if (out_path.empty()) {
        out << line << '\n';
    } else {
        std::ofstream f(out_path);
        if (!f) {
            throw std::invalid_argument("cannot open for writing: " + out_path);
        }
        f << line << '\n';
    }
}

} // namespace

int cli_run(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
    CLI::App app{"Low-rank KV-cache compression toolkit: train a byte-level "
                 "transformer, collect cache statistics, convert MHA to GQA, "
                 "and measure the result.",
                 "kvshrink"};
    app.require_subcommand(1);

    // train
    TrainOpts train_o;
    CLI::App* train_cmd = app.add_subcommand(
        "train", "Train a model from scratch on a byte corpus");
    train_cmd->add_option("--config", train_o.config_path,
                          "Model architecture JSON file")
        ->required();
    add_train_flags(train_cmd, train_o);
    train_cmd->callback([&] { run_train(train_o, out); });

    // finetune
    TrainOpts ft_o;
    std::string ft_ckpt;
    CLI::App* ft_cmd = app.add_subcommand(
        "finetune", "Continue training an existing (typically compressed) "
                    "checkpoint; projection geometry stays frozen");
    ft_cmd->add_option("--ckpt", ft_ckpt, "Input checkpoint")->required();
    add_train_flags(ft_cmd, ft_o);
    ft_cmd->callback([&] { run_finetune(ft_o, ft_ckpt, out); });

    // calibrate
    std::string cal_ckpt, cal_corpus, cal_out, cal_variant = "auto";
    std::size_t cal_groups = 0, cal_seq = 256, cal_threads = 1;
    CLI::App* cal_cmd = app.add_subcommand(
        "calibrate", "Stream a corpus through the model and collect per-group "
                     "KV Gram matrices");
    cal_cmd->add_option("--ckpt", cal_ckpt, "Input checkpoint")->required();
    cal_cmd->add_option("--corpus", cal_corpus, "Calibration corpus")
        ->required();
    cal_cmd->add_option("--groups", cal_groups, "KV group count g")->required();
    cal_cmd->add_option("--out", cal_out, "Output gram file")->required();
    cal_cmd->add_option("--variant", cal_variant,
                        "Key stream: pre_rope, post_rope, both or auto "
                        "(auto = both for rotary models, else pre_rope)")
        ->check(CLI::IsMember({"auto", "pre_rope", "post_rope", "both"}));
    cal_cmd->add_option("--context", cal_seq, "Window length");
    cal_cmd->add_option("--threads", cal_threads, "Worker thread cap");
    cal_cmd->callback([&] {
        Checkpoint ckpt = load_checkpoint(cal_ckpt);
        RopeVariant variant;
        if (cal_variant == "auto") {
            variant = ckpt.config.pos_encoding == PosEncoding::rope
                          ? RopeVariant::both
                          : RopeVariant::pre_rope;
        } else {
            variant = rope_variant_from_string(cal_variant);
        }
        GramSet gs = collect_grams(ckpt, read_corpus(cal_corpus), cal_groups,
                                   variant, cal_seq, cal_threads, cal_corpus);
        save_grams(gs, cal_out);
        out << "wrote " << cal_out << " (" << gs.token_count << " tokens)\n";
    });

    // compress
    std::string cp_ckpt, cp_grams, cp_out;
    std::string cp_strategy = "svd-a", cp_rope_mode = "fused",
                cp_key_grams = "whole";
    std::size_t cp_groups = 0;
    CLI::App* cp_cmd = app.add_subcommand(
        "compress", "Convert an MHA checkpoint to GQA with g KV heads");
    cp_cmd->add_option("--ckpt", cp_ckpt, "Input checkpoint")->required();
    cp_cmd->add_option("--groups", cp_groups, "Target KV group count g")
        ->required();
    cp_cmd->add_option("--out", cp_out, "Output checkpoint")->required();
    cp_cmd->add_option("--strategy", cp_strategy,
                       "mean-pool, svd-w or svd-a (svd-a needs --grams)")
        ->check(CLI::IsMember({"mean-pool", "svd-w", "svd-a"}));
    cp_cmd->add_option("--grams", cp_grams, "Calibration gram file (svd-a)");
    cp_cmd->add_option("--rope-mode", cp_rope_mode,
                       "fused or projected-key (rotary models need "
                       "projected-key for SVD strategies)")
        ->check(CLI::IsMember({"fused", "projected-key"}));
    cp_cmd->add_option("--key-grams", cp_key_grams,
                       "Key basis scope in projected-key mode: whole or grouped")
        ->check(CLI::IsMember({"whole", "grouped"}));
    cp_cmd->callback([&] {
        Checkpoint src = load_checkpoint(cp_ckpt);
        CompressionPlan plan;
        plan.strategy = strategy_from_string(cp_strategy);
        plan.groups = cp_groups;
        plan.rope_mode = rope_mode_from_string(cp_rope_mode);
        plan.key_scope = key_gram_scope_from_string(cp_key_grams);
        std::optional<GramSet> gs;
        if (!cp_grams.empty()) {
            gs = load_grams(cp_grams);
        }
        Checkpoint result =
            compress_checkpoint(src, plan, gs ? &*gs : nullptr);
        save_checkpoint(result, cp_out);
        out << "wrote " << cp_out << ": " << src.config.n_heads << " KV heads -> "
            << cp_groups << " (cache ratio "
            << compression_ratio(src.config.n_heads, cp_groups) << ")\n";
    });

    // eval
    std::string ev_ckpt, ev_corpus, ev_out;
    std::size_t ev_context = 256, ev_threads = 1;
    CLI::App* ev_cmd = app.add_subcommand(
        "eval", "Windowed perplexity over a held-out byte corpus");
    ev_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint")->required();
    ev_cmd->add_option("--corpus", ev_corpus, "Held-out corpus")->required();
    ev_cmd->add_option("--context", ev_context, "Window length");
    ev_cmd->add_option("--threads", ev_threads, "Worker thread cap");
    ev_cmd->add_option("--out", ev_out, "Result JSON path (default stdout)");
    ev_cmd->callback([&] {
        Checkpoint ckpt = load_checkpoint(ev_ckpt);
        double ppl =
            perplexity(ckpt, read_corpus(ev_corpus), ev_context, ev_threads);
        EvalRecord rec;
        rec.checkpoint = ev_ckpt;
        rec.context_len = ev_context;
        rec.kv_bytes = kv_memory_bytes(ckpt.config, ev_context);
        rec.ppl = ppl;
        emit_record(rec, ev_out, out);
    });

    // bench
    std::string bn_ckpt, bn_out;
    std::size_t bn_context = 2048, bn_gen = 64, bn_repeats = 5;
    CLI::App* bn_cmd = app.add_subcommand(
        "bench", "Time prefill and greedy decode at a given context length");
    bn_cmd->add_option("--ckpt", bn_ckpt, "Checkpoint")->required();
    bn_cmd->add_option("--context", bn_context, "Prefill length");
    bn_cmd->add_option("--gen", bn_gen, "Decode steps per repeat");
    bn_cmd->add_option("--repeats", bn_repeats, "Timed repeats (median)");
    bn_cmd->add_option("--out", bn_out, "Result JSON path (default stdout)");
    bn_cmd->callback([&] {
        Checkpoint ckpt = load_checkpoint(bn_ckpt);
        BenchResult br = throughput_bench(ckpt, bn_context, bn_gen, bn_repeats);
        EvalRecord rec;
        rec.checkpoint = bn_ckpt;
        rec.context_len = bn_context;
        rec.decode_tokens_per_s = br.decode_tokens_per_s;
        rec.prefill_s = br.prefill_s;
        rec.kv_bytes = br.kv_bytes;
        emit_record(rec, bn_out, out);
    });

    // analyze
    std::string an_grams, an_out, an_ckpt, an_corpus, an_recon_out;
    std::string an_strategy = "svd-a", an_rope_mode = "fused",
                an_key_grams = "whole";
    std::vector<double> an_fractions = {0.25, 0.5};
    std::size_t an_context = 256, an_threads = 1;
    CLI::App* an_cmd = app.add_subcommand(
        "analyze", "Spectrum energy report from gram files; optionally a "
                   "held-out reconstruction-error report");
    an_cmd->add_option("--grams", an_grams, "Gram file")->required();
    an_cmd->add_option("--fractions", an_fractions,
                       "Retained-rank fractions, e.g. 0.25,0.5")
        ->delimiter(',');
    an_cmd->add_option("--out", an_out, "Spectrum CSV path (default stdout)");
    an_cmd->add_option("--ckpt", an_ckpt,
                       "Uncompressed checkpoint (reconstruction report)");
    an_cmd->add_option("--corpus", an_corpus,
                       "Held-out corpus (reconstruction report)");
    an_cmd->add_option("--recon-out", an_recon_out,
                       "Reconstruction-error CSV path");
    an_cmd->add_option("--strategy", an_strategy,
                       "Basis source for reconstruction: svd-a or svd-w")
        ->check(CLI::IsMember({"svd-a", "svd-w"}));
    an_cmd->add_option("--rope-mode", an_rope_mode, "fused or projected-key")
        ->check(CLI::IsMember({"fused", "projected-key"}));
    an_cmd->add_option("--key-grams", an_key_grams, "whole or grouped")
        ->check(CLI::IsMember({"whole", "grouped"}));
    an_cmd->add_option("--context", an_context, "Window length");
    an_cmd->add_option("--threads", an_threads, "Worker thread cap");
    an_cmd->callback([&] {
        GramSet gs = load_grams(an_grams);
        std::vector<SpectrumRow> rows = spectrum_report(gs, an_fractions);
        if (an_out.empty()) {
            write_spectrum_csv(rows, out);
        } else {
            write_spectrum_csv(rows, an_out);
            out << "wrote " << an_out << '\n';
        }
        if (an_recon_out.empty()) {
            return;
        }
        if (an_ckpt.empty() || an_corpus.empty()) {
            throw std::invalid_argument(
                "--recon-out needs --ckpt and --corpus");
        }
        Checkpoint ckpt = load_checkpoint(an_ckpt);
        CompressionPlan plan;
        plan.strategy = strategy_from_string(an_strategy);
        plan.groups = gs.groups;
        plan.rope_mode = rope_mode_from_string(an_rope_mode);
        plan.key_scope = key_gram_scope_from_string(an_key_grams);
        ProjectionSet ps = plan.strategy == Strategy::svd_w
                               ? build_weight_projections(ckpt, plan)
                               : build_projections(ckpt, gs, plan);
        std::vector<ReconRow> rrows = cache_reconstruction_report(
            ckpt, ps, read_corpus(an_corpus), an_context, an_threads);
        write_recon_csv(rrows, an_recon_out);
        out << "wrote " << an_recon_out << '\n';
    });

    // generate
    std::string gn_ckpt, gn_prompt;
    std::size_t gn_new = 64;
    CLI::App* gn_cmd = app.add_subcommand(
        "generate", "Greedy continuation of a prompt, printed as bytes");
    gn_cmd->add_option("--ckpt", gn_ckpt, "Checkpoint")->required();
    gn_cmd->add_option("--prompt", gn_prompt, "Prompt text");
    gn_cmd->add_option("--gen", gn_new, "Tokens to generate");
    gn_cmd->callback([&] {
        Checkpoint ckpt = load_checkpoint(gn_ckpt);
        std::vector<int> prompt = {kBosToken};
        for (char c : gn_prompt) {
            prompt.push_back(static_cast<unsigned char>(c));
        }
        std::vector<int> all = greedy_generate(ckpt, prompt, gn_new);
        std::vector<int> cont(all.begin() + static_cast<long>(prompt.size()),
                              all.end());
        auto eos = std::find(cont.begin(), cont.end(), kEosToken);
        cont.erase(eos, cont.end());
        std::vector<std::uint8_t> bytes = decode_bytes(cont);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        out << '\n';
    });

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("kvshrink");
    for (const std::string& a : args) {
        argv.push_back(a.c_str());
    }

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
        return 0;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace kvshrink
