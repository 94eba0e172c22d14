//! Gnuplot scripts written next to the CSV outputs on request.

pub const TRAJECTORY: &str = r#"set datafile separator ','
set key autotitle columnhead outside
set xlabel 'time (s)'
set ylabel 'speed (m/s)'
plot for [i=0:20] 'trajectory.csv' using ($2==i ? $1 : NaN):5 with lines title sprintf('vehicle %d', i)
"#;

pub const TRACE: &str = r#"set datafile separator ','
set key off
set xlabel 'iteration'
set ylabel 'J'
plot 'trace.csv' using 1:4 every ::1 with linespoints
"#;

pub const SWEEP: &str = r#"set datafile separator ','
set key top left
set xlabel 'AV penetration rate'
set ylabel 'improvement (%)'
plot 'sweep.csv' using 1:4 every ::1 with linespoints title 'ASV', \
     'sweep.csv' using 1:5 every ::1 with linespoints title 'fuel'
"#;

pub const GRID: &str = r#"set datafile separator ','
set xlabel 'beta'
set ylabel 'gamma'
set zlabel 'ASV'
set dgrid3d 11,11
splot 'grid.csv' using 1:2:3 every ::1 with pm3d notitle
"#;
