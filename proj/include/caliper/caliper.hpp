/*
 * Copyright 2026 The caliper-match Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "caliper/core_data.hpp"
#include "caliper/dgp.hpp"
#include "caliper/error.hpp"
#include "caliper/estimators.hpp"
#include "caliper/experiments.hpp"
#include "caliper/inference.hpp"
#include "caliper/matching.hpp"
#include "caliper/normal.hpp"
#include "caliper/parallel.hpp"
#include "caliper/propensity.hpp"
#include "caliper/random.hpp"
#include "caliper/report_json.hpp"
#include "caliper/variance.hpp"
