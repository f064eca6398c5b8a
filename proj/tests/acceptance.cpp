// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Standalone acceptance gate: one line per criterion, exit status 1 on any
// failure.

#include <iostream>

#include "acceptance.hpp"

int main() {
  const auto results = tirnu::acceptance::run_all(std::cout);
  const bool ok = tirnu::acceptance::all_passed(results);
  std::cout << (ok ? "acceptance: all criteria passed\n" : "acceptance: FAILED\n");
  return ok ? 0 : 1;
}
