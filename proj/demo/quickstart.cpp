// Transfers a LoRA adapter from the source model to the larger target model
// on boolean expressions with the default presets. The first run pretrains
// both bases and caches them under .tlra-cache; later runs take about a
// minute. Pass a task name as the first argument to try another task.

#include <cstdio>

#include "translora/harness.hpp"

using namespace translora;

int main(int argc, char** argv) {
  ExperimentConfig c;
  if (argc > 1) c.task = argv[1];

  try {
    const Bases bases = pretrain_bases(c, false, [](const std::string& role, std::size_t step, double loss) {
      if (step % 500 == 0) std::printf("pretrain %-6s step %4zu  loss %.3f\n", role.c_str(), step, loss);
    });
    const TransferOutcome out = run_transfer(c, bases);
    const RunReport& r = out.report;
    std::printf("\ntask %s, %zu curated prompts (%zu rejected, %zu unparsable)\n", r.task.c_str(), r.corpus_size,
                r.curation->rejected, r.curation->parse_failures);
    std::printf("  source model + LoRA   %.3f\n", r.source_lora_acc);
    std::printf("  target model, no LoRA %.3f\n", r.target_base_acc);
    std::printf("  target + transferred  %.3f\n", r.transferred_acc);
    std::printf("  MMD^2 to test prompts: curated %.4f, unfiltered %.4f\n", r.mmd->filtered, r.mmd->unfiltered);
    std::printf("\nsample curated prompts:\n");
    for (std::size_t i = 0; i < 5 && i < out.artifacts.curated.size(); ++i) {
      std::printf("  %s\n", out.artifacts.curated[i].prompt_text.c_str());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
  return 0;
}
