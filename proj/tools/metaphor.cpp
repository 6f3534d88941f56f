#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "metaphor/commands.hpp"
#include "metaphor/synthetic.hpp"

namespace {

using namespace metaphor;

struct CommandOptions {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& description, CommandOptions& opts) {
  CLI::App* sub = app.add_subcommand(name, description);
  sub->add_option("--config", opts.config_path, "JSON config file");
  for (const auto& key : config_help()) {
    std::string& slot = opts.overrides[key.name];
    sub->add_option(std::string("--") + key.name, slot, key.help);
  }
  return sub;
}

Config resolve_config(CLI::App* sub, const CommandOptions& opts) {
  Config c = opts.config_path.empty() ? Config() : Config::from_file(opts.config_path);
  for (const auto& [key, value] : opts.overrides) {
    if (sub->count("--" + key)) c.set_text(key, value);
  }
  return c;
}

struct SynthOptions {
  std::string task = "cooccurrence";
  std::string output;
  std::string vectors;
  std::size_t sentences = 1000;
  std::size_t vocab = 50;
  std::size_t dim = 50;
  std::size_t min_length = 5;
  std::size_t max_length = 15;
  std::uint64_t seed = 1;
};

int run_synth(const SynthOptions& o) {
  LabeledCorpus corpus;
  if (o.task == "cooccurrence") {
    corpus = synthetic::cooccurrence_corpus({o.sentences, o.min_length, o.max_length, o.vocab, o.seed});
  } else if (o.task == "random") {
    corpus = synthetic::random_label_corpus(o.sentences, o.vocab, o.seed, o.min_length, o.max_length);
  } else {
    throw ConfigError("unknown synthetic task '" + o.task + "' (expected cooccurrence or random)");
  }
  if (o.output.empty()) {
    synthetic::write_corpus(std::cout, corpus);
  } else {
    std::ofstream out(o.output, std::ios::binary);
    if (!out) throw IoError("cannot write '" + o.output + "'");
    synthetic::write_corpus(out, corpus);
  }
  if (!o.vectors.empty()) save_vec(o.vectors, synthetic::mismatched_vectors(o.vocab, o.dim, o.seed));
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural metaphor detection: CNN, BiLSTM, BiGRU and CRNN sentence classifiers"};
  app.require_subcommand(1);

  CommandOptions train_opts, crossval_opts, sweep_opts, predict_opts, gradcheck_opts;
  CLI::App* train = add_command(app, "train", "train on a corpus and write a checkpoint", train_opts);
  CLI::App* crossval = add_command(app, "crossval", "k-fold cross-validation of one configuration", crossval_opts);
  CLI::App* sweep = add_command(app, "sweep", "cross-validate a grid of models, dimensionalities and fine-tune modes",
                                sweep_opts);
  CLI::App* predict = add_command(app, "predict", "label sentences with a trained checkpoint", predict_opts);
  CLI::App* gradcheck = add_command(app, "gradcheck", "finite-difference check of every layer and model",
                                    gradcheck_opts);

  SynthOptions synth_opts;
  CLI::App* synth = app.add_subcommand("synth", "write a synthetic labeled corpus (and optional word vectors)");
  synth->add_option("--task", synth_opts.task, "cooccurrence or random")->capture_default_str();
  synth->add_option("--output", synth_opts.output, "corpus path (default: stdout)");
  synth->add_option("--vectors", synth_opts.vectors, "also write task-agnostic random vectors to this .vec path");
  synth->add_option("--sentences", synth_opts.sentences)->capture_default_str();
  synth->add_option("--vocab", synth_opts.vocab)->capture_default_str();
  synth->add_option("--dim", synth_opts.dim, "vector dimensionality")->capture_default_str();
  synth->add_option("--min_length", synth_opts.min_length)->capture_default_str();
  synth->add_option("--max_length", synth_opts.max_length)->capture_default_str();
  synth->add_option("--seed", synth_opts.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_config;
  }

  try {
    if (train->parsed()) return cmd_train(resolve_config(train, train_opts));
    if (crossval->parsed()) return cmd_crossval(resolve_config(crossval, crossval_opts));
    if (sweep->parsed()) return cmd_sweep(resolve_config(sweep, sweep_opts));
    if (predict->parsed()) return cmd_predict(resolve_config(predict, predict_opts));
    if (gradcheck->parsed()) return cmd_gradcheck(resolve_config(gradcheck, gradcheck_opts));
    if (synth->parsed()) return run_synth(synth_opts);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return exit_config;
  } catch (const ParameterError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return exit_config;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return exit_data;
  } catch (const VocabularyError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return exit_data;
  } catch (const EmptySequenceError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return exit_data;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_failure;
  }
  return exit_failure;
}
