// Pilot sweep on held-out seeds: mean ACC / FM / ACC_AUC of ER, ER-CBA,
// ER-Dual-CBA without and with IBN on the canonical stream (optionally with
// separation / learning rates overridden). Used to fix the acceptance
// configuration and margins; see pilot/README.md.

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "dualcba/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pilot sweep"};
  std::uint64_t base = 100;
  int seeds = 10;
  std::vector<double> separations{1.25}, alphas{0.07}, betas{0.01};
  app.add_option("--seed-base", base, "first pilot seed");
  app.add_option("--seeds", seeds, "number of seeds");
  app.add_option("--separation", separations, "class-mean radius values");
  app.add_option("--alpha", alphas, "inner learning rates");
  app.add_option("--beta", betas, "outer learning rates");
  CLI11_PARSE(app, argc, argv);

  struct Variant {
    const char* name;
    dcba::CbaKind kind;
    bool ibn;
  };
  const Variant variants[] = {{"er", dcba::CbaKind::off, false},
                              {"er_cba", dcba::CbaKind::specific, false},
                              {"dual_noibn", dcba::CbaKind::dual, false},
                              {"dual", dcba::CbaKind::dual, true}};
  for (double sep : separations)
    for (double a : alphas)
      for (double b : betas) {
        std::printf("== separation %g alpha %g beta %g seeds %llu..%llu\n", sep, a, b,
                    static_cast<unsigned long long>(base), static_cast<unsigned long long>(base + seeds - 1));
        double res[4][3] = {};
        for (int v = 0; v < 4; ++v) {
          for (int s = 0; s < seeds; ++s) {
            auto spec = dcba::canonical_spec(variants[v].kind, variants[v].ibn);
            spec.synthetic.separation = sep;
            spec.train.alpha = a;
            spec.train.beta = b;
            auto r = dcba::run_single(spec, base + static_cast<std::uint64_t>(s), nullptr);
            res[v][0] += r.acc / seeds;
            res[v][1] += r.fm / seeds;
            res[v][2] += r.acc_auc / seeds;
          }
          std::printf("%-11s ACC %.4f FM %.4f ACC_AUC %.2f\n", variants[v].name, res[v][0], res[v][1], res[v][2]);
        }
        std::printf("dual - er: ACC %+.2f points, FM reduction %.1f%%; dual - er_cba ACC_AUC %+.2f; ibn on - off ACC %+.2f points\n",
                    100 * (res[3][0] - res[0][0]), 100 * (1 - res[3][1] / res[0][1]), res[3][2] - res[1][2],
                    100 * (res[3][0] - res[2][0]));
      }
  return 0;
}
