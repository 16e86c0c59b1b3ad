#include "fptq/grad.hpp"

#include <cmath>

#include "fptq/common.hpp"

namespace fptq {

std::vector<double> finite_diff_grad(const ScalarFn& f, const std::vector<double>& theta, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
    std::vector<double> grad(theta.size());
    std::vector<double> point = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        point[i] = theta[i] + h;
        const double up = f(point);
        point[i] = theta[i] - h;
        const double down = f(point);
        point[i] = theta[i];
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericalError("finite_diff_grad: non-finite objective evaluation");
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace fptq
