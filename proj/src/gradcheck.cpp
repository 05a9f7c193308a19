#include "taco/gradcheck.hpp"

#include <cmath>
#include <cstdlib>

namespace taco::num {

GradCheckReport grad_check(const std::function<Var()>& build, const ParamSet& params,
                           double h) {
  Var root = build();
  GradSink sink = backward(root);

  GradCheckReport report;
  for (const auto& [name, param] : params.items()) {
    Tensor analytic = sink.take(param.get());
    for (int i = 0; i < param->value.numel(); ++i) {
      double saved = param->value.at(i);
      param->value.at(i) = saved + h;
      double up = build()->value.scalar_value();
      param->value.at(i) = saved - h;
      double down = build()->value.scalar_value();
      param->value.at(i) = saved;
      double numeric = (up - down) / (2.0 * h);
      double a = analytic.at(i);
      double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      double rel = std::abs(a - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace taco::num
