#include "advae/rng.hpp"

#include <sstream>

#include "advae/errors.hpp"

namespace advae {

std::string Rng::state() const {
  std::ostringstream os;
  os << normal_draws_ << ' ' << uniform_draws_ << ' ' << engine_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  std::uint64_t nd = 0, ud = 0;
  std::mt19937_64 engine;
  is >> nd >> ud >> engine;
  if (is.fail()) throw FormatError("unparseable RNG state");
  engine_ = engine;
  normal_draws_ = nd;
  uniform_draws_ = ud;
}

}  // namespace advae
