#pragma once

#include "mambo/backbone.hpp"
#include "mambo/backdoor.hpp"
#include "mambo/boundary.hpp"
#include "mambo/checkpoint.hpp"
#include "mambo/cibm.hpp"
#include "mambo/config.hpp"
#include "mambo/data.hpp"
#include "mambo/gradcheck.hpp"
#include "mambo/gsm.hpp"
#include "mambo/losses.hpp"
#include "mambo/model.hpp"
#include "mambo/nn.hpp"
#include "mambo/raster.hpp"
#include "mambo/tensor.hpp"
#include "mambo/train.hpp"
